import json
import os

import numpy as np
import pytest

from splitfire import nn
from splitfire.data import synth_dataset, write_pgm
from splitfire.errors import ConfigError, ValidationError
from splitfire.experiment import (
    ARMS,
    BatchSchedule,
    ExperimentConfig,
    MetricsRecord,
    distortion_metrics,
    dump_feature_channels,
    emit_metrics,
    feature_map_report,
    parse_hostport,
    round_quotas,
    run_arm,
    run_central,
    run_split_loopback,
    split_and_partition,
)
from splitfire.nn import build_model, param_digest, small_vgg_specs
from splitfire.rng import SplitMix64
from splitfire.split import cut_model
from splitfire.tensor import Tensor


SMALL = dict(epochs=2, synth_n=60, seed=0)


# --- config ---------------------------------------------------------------------


def test_config_defaults_match_training_table():
    c = ExperimentConfig()
    assert c.epochs == 50
    assert c.batch_size == 32
    assert c.learning_rate == 0.05
    assert c.n_clients == 3


def test_config_rejects_unknown_arm():
    with pytest.raises(ConfigError):
        ExperimentConfig(arm="federated")


def test_config_from_dict_rejects_unknown_fields():
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig.from_dict({"arm": "central", "optimizer": "adam"})


def test_config_from_file(tmp_path):
    path = os.path.join(tmp_path, "config.json")
    with open(path, "w") as fh:
        json.dump({"arm": "split-equal", "epochs": 3, "seed": 7}, fh)
    c = ExperimentConfig.from_file(path)
    assert c.arm == "split-equal" and c.epochs == 3 and c.seed == 7


def test_config_from_file_rejects_bad_json(tmp_path):
    path = os.path.join(tmp_path, "bad.json")
    with open(path, "w") as fh:
        fh.write("{nope")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(path)


def test_arm_ratios():
    assert ExperimentConfig(arm="split-setup").ratios == (7.0, 2.0, 1.0)
    assert ExperimentConfig(arm="split-imbalanced").ratios == (8.0, 1.0, 1.0)
    assert ExperimentConfig(arm="split-equal").ratios == (1.0, 1.0, 1.0)


def test_parse_hostport():
    assert parse_hostport("127.0.0.1:9000") == ("127.0.0.1", 9000)
    with pytest.raises(ConfigError):
        parse_hostport("localhost")
    with pytest.raises(ConfigError):
        parse_hostport("h:99999")


# --- quota schedule ---------------------------------------------------------------


def test_round_quotas_full_batch():
    # remaining 100/50/50 -> 32 apportioned 16/8/8
    assert round_quotas([100, 50, 50], 32) == [16, 8, 8]


def test_round_quotas_exhausted_client_sits_out():
    assert round_quotas([10, 0, 6], 8) == [5, 0, 3]


def test_round_quotas_short_final_round():
    assert round_quotas([3, 1, 0], 32) == [3, 1, 0]


def test_round_quotas_all_consumed():
    assert round_quotas([0, 0, 0], 32) is None


def test_round_quotas_min_one_for_active():
    quotas = round_quotas([100, 1, 1], 32)
    assert quotas[1] >= 1 and quotas[2] >= 1
    assert sum(quotas) == 32


def test_schedule_consumes_every_sample_each_epoch():
    parts = [np.arange(0, 48), np.arange(48, 54), np.arange(54, 60)]
    schedule = BatchSchedule(parts, 32, seed=3)
    for epoch in (1, 2):
        seen = []
        for batches in schedule.epoch_rounds(epoch):
            assert sum(len(b) for b in batches.values()) <= 32
            for cid, idx in batches.items():
                assert set(idx) <= set(parts[cid])
                seen.extend(idx.tolist())
        assert sorted(seen) == list(range(60))


def test_schedule_round_count():
    schedule = BatchSchedule([np.arange(40), np.arange(5), np.arange(5)], 32, seed=0)
    assert schedule.rounds_per_epoch == 2


# --- central arm --------------------------------------------------------------------


def test_central_run_loss_decreases():
    records = run_central(ExperimentConfig(arm="central", epochs=4, synth_n=80, seed=42))
    assert len(records) == 4
    assert records[-1].train_loss < records[0].train_loss
    assert all(r.arm == "central" and r.seed == 42 for r in records)


def test_central_wall_ms_zero_without_timing():
    records = run_central(ExperimentConfig(arm="central", epochs=1, synth_n=40))
    assert records[0].wall_ms == 0.0


def test_central_wall_ms_positive_with_timing():
    records = run_central(ExperimentConfig(arm="central", epochs=1, synth_n=40, timing=True))
    assert records[0].wall_ms > 0.0


# --- split arms over loopback ---------------------------------------------------------


def test_split_equal_matches_central_per_epoch():
    central = run_central(ExperimentConfig(arm="central", **SMALL))
    split = run_split_loopback(ExperimentConfig(arm="split-equal", **SMALL))
    assert len(central) == len(split)
    for c, s in zip(central, split):
        assert abs(c.train_loss - s.train_loss) < 1e-5
        assert c.test_accuracy == s.test_accuracy


def test_split_fronts_stay_synchronized():
    _, engine, workers = run_split_loopback(
        ExperimentConfig(arm="split-setup", **SMALL), collect=True
    )
    digests = {w.front_digest() for w in workers}
    digests.add(param_digest(engine.front.params))
    assert len(digests) == 1


def test_split_imbalanced_partition_sizes():
    config = ExperimentConfig(arm="split-imbalanced", synth_n=750, epochs=1)
    ds = synth_dataset(750, 0.4, 0)
    partitions, test_idx = split_and_partition(config, ds)
    assert [len(p) for p in partitions] == [480, 60, 60]
    assert len(test_idx) == 150


def test_run_arm_rejects_tcp():
    with pytest.raises(ConfigError):
        run_arm(ExperimentConfig(arm="split-equal", transport="tcp", **SMALL))


def test_run_arm_saves_model(tmp_path):
    path = os.path.join(tmp_path, "trained.ckpt")
    run_arm(ExperimentConfig(arm="split-equal", save_model=path, **SMALL))
    model = nn.load_model(path)
    assert [s.kind for s in model.specs] == [s.kind for s in small_vgg_specs()]


# --- metrics emission -----------------------------------------------------------------


def _records():
    return [
        MetricsRecord("central", 0, 1, 0.6931471805, 0.5, 0.0),
        MetricsRecord("central", 0, 2, 0.1234567, 0.958333, 0.0),
    ]


def test_csv_layout(tmp_path):
    path = os.path.join(tmp_path, "m.csv")
    emit_metrics(_records(), path)
    lines = open(path, encoding="utf-8").read().split("\n")
    assert lines[0] == "arm,seed,epoch,train_loss,test_accuracy,wall_ms"
    assert lines[1] == "central,0,1,0.693147,0.5,0"
    assert lines[2] == "central,0,2,0.123457,0.958333,0"
    assert lines[3] == ""


def test_csv_empty_records_header_only(tmp_path):
    path = os.path.join(tmp_path, "empty.csv")
    emit_metrics([], path)
    assert open(path, encoding="utf-8").read() == "arm,seed,epoch,train_loss,test_accuracy,wall_ms\n"


def test_csv_one_record_two_lines(tmp_path):
    path = os.path.join(tmp_path, "one.csv")
    emit_metrics(_records()[:1], path)
    assert open(path, encoding="utf-8").read().count("\n") == 2


def test_emission_byte_stable(tmp_path):
    a = os.path.join(tmp_path, "a.csv")
    b = os.path.join(tmp_path, "b.csv")
    emit_metrics(_records(), a)
    emit_metrics(_records(), b)
    assert open(a, "rb").read() == open(b, "rb").read()


def test_jsonl_layout(tmp_path):
    path = os.path.join(tmp_path, "m.jsonl")
    emit_metrics(_records(), path, fmt="jsonl")
    lines = open(path, encoding="utf-8").read().strip().split("\n")
    doc = json.loads(lines[0])
    assert doc == {"arm": "central", "seed": 0, "epoch": 1,
                   "train_loss": 0.693147, "test_accuracy": 0.5, "wall_ms": 0.0}


def test_emit_rejects_unknown_format(tmp_path):
    with pytest.raises(ValidationError):
        emit_metrics([], os.path.join(tmp_path, "x"), fmt="xml")


# --- distortion report ------------------------------------------------------------------


def test_distortion_identity_channel():
    rng = SplitMix64(5)
    img = rng.uniform(0.0, 1.0, 64 * 64).reshape(1, 64, 64)
    original = Tensor(img.astype(np.float32))
    # feature map channel 0 = the center-cropped original itself
    crop = img[0, 1:63, 1:63]
    fm = Tensor(crop[None, :, :].astype(np.float32))
    report = distortion_metrics(original, fm)
    assert abs(report["channels"][0]["correlation"] - 1.0) < 1e-5
    assert report["channels"][0]["psnr_db"] == 99.0  # capped sentinel


def test_distortion_constant_channel():
    rng = SplitMix64(6)
    original = Tensor(rng.uniform(0.0, 1.0, 64 * 64).reshape(1, 64, 64).astype(np.float32))
    fm = Tensor(np.full((1, 62, 62), 0.25, dtype=np.float32))
    report = distortion_metrics(original, fm)
    ch = report["channels"][0]
    assert ch["correlation"] == 0.0
    # best affine fit of a constant is the mean image
    ref = original.data[0, 1:63, 1:63].astype(np.float64)
    expected = 10 * np.log10(1.0 / np.mean((ref - ref.mean()) ** 2))
    assert abs(ch["psnr_db"] - expected) < 1e-6


def test_distortion_correlations_bounded():
    front = cut_model(build_model(small_vgg_specs(), seed=8)).front
    ds = synth_dataset(4, 0.5, seed=8)
    image, _ = ds.sample(int(np.flatnonzero(ds.labels == 1.0)[0]))
    fm, _ = nn.forward(front, Tensor(image.data[None]))
    report = distortion_metrics(image, Tensor(fm.data[0]))
    assert len(report["channels"]) == 8
    for ch in report["channels"]:
        assert -1.0 <= ch["correlation"] <= 1.0
        assert ch["psnr_db"] <= 99.0


def test_feature_map_report_files(tmp_path):
    front = cut_model(build_model(small_vgg_specs(), seed=9)).front
    ds = synth_dataset(4, 0.5, seed=9)
    image, _ = ds.sample(0)
    out = os.path.join(tmp_path, "report")
    report = feature_map_report(front, image, out)
    assert os.path.exists(os.path.join(out, "report.json"))
    assert sorted(report["channel_dumps"]) == [f"channel_{c:02d}.pgm" for c in range(8)]
    for name in report["channel_dumps"]:
        assert os.path.exists(os.path.join(out, name))


def test_dump_feature_channels_normalized(tmp_path):
    fm = Tensor(np.linspace(-2, 2, 2 * 4 * 4, dtype=np.float32).reshape(2, 4, 4))
    paths = dump_feature_channels(fm, os.path.join(tmp_path, "ch"))
    assert len(paths) == 2
    from splitfire.data import read_pgm

    img = read_pgm(paths[0])
    assert img.min() == 0.0 and img.max() == 1.0
