"""Experiment arms, metrics emission, and the feature-map distortion report.

Three arms reproduce the paper-style comparison at desk scale: `central`
trains the uncut model, `split-equal` / `split-setup` / `split-imbalanced`
run the client/server round loop over a transport. All arms consume the same
canonical batch schedule (per-client shuffles concatenated in client order),
so split-equal and central are the same optimization trajectory.
"""

import json
import math
import os
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import data as D
from . import nn
from . import split as S
from . import transport as TR
from .errors import ConfigError, ProtocolError, ValidationError
from .rng import mix64
from .tensor import Tensor

ARMS = ("central", "split-equal", "split-setup", "split-imbalanced")

ARM_PLANS = {
    "central": "equal",
    "split-equal": "equal",
    "split-setup": "setup",
    "split-imbalanced": "imbalanced",
}

METRICS_FIELDS = ("arm", "seed", "epoch", "train_loss", "test_accuracy", "wall_ms")


@dataclass(frozen=True)
class MetricsRecord:
    arm: str
    seed: int
    epoch: int
    train_loss: float
    test_accuracy: float
    wall_ms: float


@dataclass(frozen=True)
class ExperimentConfig:
    arm: str = "central"
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0
    n_clients: int = 3
    synth_n: int = 600
    synth_balance: float = 0.4
    manifest: str | None = None  # PGM manifest path; overrides synthetic source
    transport: str = "loopback"
    listen: str = "127.0.0.1:0"
    connect: str = "127.0.0.1:0"
    out: str | None = None
    format: str = "csv"
    timing: bool = False  # wall_ms is 0 unless enabled, keeping outputs byte-stable
    save_model: str | None = None

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ConfigError(f"arm must be one of {ARMS}, got {self.arm!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.n_clients < 1:
            raise ConfigError("n_clients must be >= 1")
        if self.synth_n < 2:
            raise ConfigError("synth_n must be >= 2")
        if self.format not in ("csv", "jsonl"):
            raise ConfigError(f"format must be csv or jsonl, got {self.format!r}")
        if self.transport not in ("loopback", "tcp"):
            raise ConfigError(f"transport must be loopback or tcp, got {self.transport!r}")

    @property
    def ratios(self):
        name = ARM_PLANS[self.arm]
        base = D.NAMED_PLANS[name]
        if len(base) != self.n_clients:
            if name == "equal":
                return tuple(1.0 for _ in range(self.n_clients))
            raise ConfigError(
                f"plan {name} defines {len(base)} clients, config says {self.n_clients}"
            )
        return base

    @classmethod
    def from_dict(cls, doc):
        unknown = set(doc) - {f.name for f in cls.__dataclass_fields__.values()}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a flat JSON object")
        return cls.from_dict(doc)


def parse_hostport(text):
    host, sep, port_s = text.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"expected host:port, got {text!r}")
    try:
        port = int(port_s)
    except ValueError:
        raise ConfigError(f"bad port in {text!r}") from None
    if not 0 <= port <= 65535:
        raise ConfigError(f"port {port} outside 0..65535")
    return host, port


# --- data plumbing shared by all arms ----------------------------------------


def build_dataset(config):
    if config.manifest:
        return D.load_image_dir(config.manifest)
    return D.synth_dataset(config.synth_n, config.synth_balance, config.seed)


def split_and_partition(config, dataset):
    """Same train/test split for every arm; partition depends on the plan."""
    train_idx, test_idx = D.train_test_split(dataset, 0.2, seed=config.seed)
    plan = D.PartitionPlan(config.ratios, seed=config.seed)
    parts = D.partition(len(train_idx), plan)
    return [train_idx[p] for p in parts], test_idx


def round_quotas(remaining, batch_size):
    """Per-round quotas: min(batch, what's left) apportioned over the clients
    that still hold samples, proportional to their remaining counts, at least
    one each. Guarantees every epoch is consumed exactly."""
    total_left = sum(remaining)
    if total_left == 0:
        return None
    active = [i for i, r in enumerate(remaining) if r > 0]
    budget = min(batch_size, total_left)
    if budget < len(active):  # cannot give everyone one; favor lower ids
        counts = [0] * len(remaining)
        for i in active[:budget]:
            counts[i] = 1
        return counts
    sizes = D.largest_remainder(
        budget,
        [remaining[i] for i in active],
        caps=[remaining[i] for i in active],
        min_one=True,
    )
    counts = [0] * len(remaining)
    for i, s in zip(active, sizes):
        counts[i] = s
    return counts


class BatchSchedule:
    """Canonical per-epoch, per-client batch plan shared by every arm."""

    def __init__(self, partitions, batch_size, seed):
        self.partitions = partitions
        self.batch_size = batch_size
        self.seed = seed
        self.rounds_per_epoch = math.ceil(sum(len(p) for p in partitions) / batch_size)

    def epoch_rounds(self, epoch):
        """Yields {client_id: index array} for each round of the epoch."""
        orders = [
            D.epoch_order(p, self.seed, cid, epoch)
            for cid, p in enumerate(self.partitions)
        ]
        cursors = [0] * len(orders)
        while True:
            remaining = [len(o) - c for o, c in zip(orders, cursors)]
            quotas = round_quotas(remaining, self.batch_size)
            if quotas is None:
                return
            batches = {}
            for cid, q in enumerate(quotas):
                if q > 0:
                    batches[cid] = orders[cid][cursors[cid] : cursors[cid] + q]
                    cursors[cid] += q
            yield batches


def evaluate(model, dataset, indices, chunk=64):
    """Test accuracy over the given indices; chunked, batch-independent."""
    hits = 0
    for start in range(0, len(indices), chunk):
        batch, labels = dataset.batch(indices[start : start + chunk])
        pred, _ = nn.forward(model, batch, keep_cache=False)
        hits += int(((pred.data >= 0.5) == (labels.data >= 0.5)).sum())
    return hits / len(indices)


def _epoch_record(config, epoch, losses_sizes, test_acc, t0):
    total = sum(n for _, n in losses_sizes)
    train_loss = sum(l * n for l, n in losses_sizes) / total
    wall = (time.perf_counter() - t0) * 1000.0 if config.timing else 0.0
    return MetricsRecord(config.arm, config.seed, epoch, train_loss, test_acc, wall)


# --- central arm --------------------------------------------------------------


def run_central(config, dataset=None, collect_model=False):
    dataset = dataset or build_dataset(config)
    partitions, test_idx = split_and_partition(config, dataset)
    schedule = BatchSchedule(partitions, config.batch_size, config.seed)
    model = nn.build_model(nn.small_vgg_specs(), seed=config.seed)
    records = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for batches in schedule.epoch_rounds(epoch):
            idx = np.concatenate([batches[cid] for cid in sorted(batches)])
            batch, labels = dataset.batch(idx)
            pred, cache = nn.forward(model, batch)
            loss, grad_pred = nn.bce_loss(pred, labels)
            grads, _ = nn.backward(model, cache, grad_pred, need_input_grad=False)
            model.params = nn.sgd_step(model.params, grads, config.learning_rate)
            losses.append((loss, len(idx)))
        acc = evaluate(model, dataset, test_idx)
        records.append(_epoch_record(config, epoch, losses, acc, t0))
    return (records, model) if collect_model else records


# --- split arms ---------------------------------------------------------------


class SplitServerEngine:
    """Server-side round handler: owns the back model and the front mirror."""

    def __init__(self, config, dataset=None):
        self.config = config
        self.dataset = dataset or build_dataset(config)
        self.partitions, self.test_idx = split_and_partition(config, self.dataset)
        self.schedule = BatchSchedule(self.partitions, config.batch_size, config.seed)
        sm = S.cut_model(
            nn.build_model(nn.small_vgg_specs(), seed=config.seed),
            nn.SMALL_VGG_CUT_INDEX,
        )
        self.front = sm.front
        self.back = sm.back
        self.records = []
        self.round_no = 0
        self.epoch = 0
        self._epoch_iter = None
        self._epoch_losses = []
        self._epoch_t0 = 0.0
        self._pending = None  # batch sizes of the in-flight round
        self._trained_model = None

    def start(self, hellos):
        expected = {cid: len(p) for cid, p in enumerate(self.partitions)}
        if dict(hellos) != expected:
            raise ProtocolError(
                f"clients announced partitions {dict(hellos)}, expected {expected}"
            )

    def next_round(self):
        while True:
            if self._epoch_iter is None:
                if self.epoch >= self.config.epochs:
                    self._trained_model = S.merge_model(
                        S.SplitModel(self.front, self.back, nn.SMALL_VGG_CUT_INDEX)
                    )
                    return None
                self.epoch += 1
                self._epoch_iter = self.schedule.epoch_rounds(self.epoch)
                self._epoch_losses = []
                self._epoch_t0 = time.perf_counter()
            batches = next(self._epoch_iter, None)
            if batches is None:
                self._epoch_iter = None
                continue
            self.round_no += 1
            quotas = [len(batches.get(cid, ())) for cid in range(self.config.n_clients)]
            self._pending = {cid: q for cid, q in enumerate(quotas) if q > 0}
            return self.round_no, tuple(quotas)

    def on_activations(self, round_no, acts):
        ids = sorted(acts)
        if sorted(self._pending) != ids:
            raise ProtocolError(
                f"round {round_no}: expected clients {sorted(self._pending)}, got {ids}"
            )
        fms = [acts[cid][0] for cid in ids]
        labels = [acts[cid][1] for cid in ids]
        result = S.server_round(self.back, fms, labels, ids)
        self.back.params = nn.sgd_step(
            self.back.params, result.back_grads, self.config.learning_rate
        )
        self._epoch_losses.append((result.loss, sum(result.batch_sizes)))
        self._last = result
        return dict(zip(ids, result.per_client_cut_grads))

    def on_front_grads(self, round_no, grads):
        ids = sorted(grads)
        per_client = [unflatten_like(grads[cid], self.front.params) for cid in ids]
        sizes = [self._pending[cid] for cid in ids]
        self.front.params = S.sync_front_weights(
            self.front.params, per_client, sizes, self.config.learning_rate
        )
        metrics = None
        if self._epoch_end_reached():
            model = S.merge_model(
                S.SplitModel(self.front, self.back, nn.SMALL_VGG_CUT_INDEX)
            )
            acc = evaluate(model, self.dataset, self.test_idx)
            self.records.append(
                _epoch_record(self.config, self.epoch, self._epoch_losses, acc, self._epoch_t0)
            )
            metrics = (self.records[-1].train_loss, acc)
        self._pending = None
        return tuple(self.front.parameters()), metrics

    def _epoch_end_reached(self):
        consumed = sum(n for _, n in self._epoch_losses)
        return consumed == sum(len(p) for p in self.partitions)


class SplitClientWorker:
    """Client-side worker: owns the front model and its data partition."""

    def __init__(self, config, client_id, dataset=None):
        self.config = config
        self.client_id = client_id
        self.dataset = dataset or build_dataset(config)
        partitions, _ = split_and_partition(config, self.dataset)
        self.indices = partitions[client_id]
        sm = S.cut_model(
            nn.build_model(nn.small_vgg_specs(), seed=config.seed),
            nn.SMALL_VGG_CUT_INDEX,
        )
        self.front = sm.front
        self.epoch = 0
        self._order = None
        self._cursor = 0
        self._cache = None
        self._round_total = 0
        self._round_n = 0

    def partition_size(self):
        return len(self.indices)

    def on_round_start(self, round_no, quotas):
        quota = quotas[self.client_id]
        if quota == 0:
            self._cache = None
            return None
        if self._order is None or self._cursor >= len(self._order):
            self.epoch += 1
            self._order = D.epoch_order(
                self.indices, self.config.seed, self.client_id, self.epoch
            )
            self._cursor = 0
        idx = self._order[self._cursor : self._cursor + quota]
        if len(idx) < quota:
            raise ProtocolError(
                f"client {self.client_id}: quota {quota} exceeds remaining "
                f"{len(self._order) - self._cursor} samples"
            )
        self._cursor += quota
        batch, labels = self.dataset.batch(idx)
        fm, self._cache = S.client_forward(self.front, batch)
        self._round_total = sum(quotas)
        self._round_n = quota
        return fm, labels

    def on_gradients(self, round_no, cut_grad):
        raw = S.client_backward(self.front, self._cache, cut_grad)
        self._cache = None
        scaled = S.local_mean_grads(raw, self._round_n, self._round_total)
        return flatten_grads(scaled)

    def on_weight_sync(self, round_no, tensors):
        self.front.params = self.front.replace_parameters(list(tensors))

    def on_metrics(self, round_no, loss, accuracy):
        pass

    def front_digest(self):
        return nn.param_digest(self.front.params)


def flatten_grads(nested):
    """Pack nested per-layer gradients into one 1-d wire tensor."""
    flats = [g.data.ravel() for layer in nested for g in layer]
    return Tensor(np.concatenate(flats).astype(np.float32))


def unflatten_like(flat, params_template):
    """Inverse of flatten_grads against a nested parameter structure."""
    vec = flat.data.ravel()
    expected = sum(p.size for layer in params_template for p in layer)
    if vec.size != expected:
        raise ProtocolError(f"flat gradient has {vec.size} values, expected {expected}")
    out, pos = [], 0
    for layer in params_template:
        row = []
        for p in layer:
            chunk = vec[pos : pos + p.size]
            pos += p.size
            row.append(Tensor(chunk.reshape(p.shape).astype(p.dtype)))
        out.append(row)
    return out


def run_split_loopback(config, dataset=None, collect=False):
    """Spawn in-process client workers plus the server engine over loopback."""
    dataset = dataset or build_dataset(config)
    endpoint = TR.loopback_endpoint(config.n_clients)
    engine = SplitServerEngine(config, dataset)
    workers = [SplitClientWorker(config, cid, dataset) for cid in range(config.n_clients)]
    failures = []

    def client_main(worker):
        try:
            TR.connect(endpoint, worker.client_id, worker)
        except BaseException as e:  # surfaced after join
            failures.append(e)

    threads = [
        threading.Thread(target=client_main, args=(w,), daemon=True) for w in workers
    ]
    for t in threads:
        t.start()
    try:
        TR.serve(endpoint, config.n_clients, engine)
    finally:
        for t in threads:
            t.join(timeout=TR.DEFAULT_ROUND_TIMEOUT)
    if failures:
        raise failures[0]
    if collect:
        return engine.records, engine, workers
    return engine.records


def run_arm(config, dataset=None):
    """Run one experiment arm end to end; returns per-epoch MetricsRecords."""
    if config.arm == "central":
        records, model = run_central(config, dataset, collect_model=True)
    else:
        if config.transport != "loopback":
            raise ConfigError(
                "run executes split arms over loopback; use the serve/client "
                "commands for tcp"
            )
        records, engine, _ = run_split_loopback(config, dataset, collect=True)
        model = engine._trained_model
    if config.save_model:
        nn.save_model(model, config.save_model)
    if config.out:
        emit_metrics(records, config.out, config.format)
    return records


# --- metrics emission ---------------------------------------------------------


def _format_real(x):
    return f"{x:.6g}"


def emit_metrics(records, path, fmt="csv"):
    """Write records as CSV or JSON-lines; byte-stable for equal inputs."""
    if fmt not in ("csv", "jsonl"):
        raise ValidationError(f"format must be csv or jsonl, got {fmt!r}")
    lines = []
    if fmt == "csv":
        lines.append(",".join(METRICS_FIELDS))
        for r in records:
            lines.append(
                f"{r.arm},{r.seed},{r.epoch},{_format_real(r.train_loss)},"
                f"{_format_real(r.test_accuracy)},{_format_real(r.wall_ms)}"
            )
    else:
        for r in records:
            lines.append(json.dumps({
                "arm": r.arm,
                "seed": r.seed,
                "epoch": r.epoch,
                "train_loss": float(_format_real(r.train_loss)),
                "test_accuracy": float(_format_real(r.test_accuracy)),
                "wall_ms": float(_format_real(r.wall_ms)),
            }))
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as e:
        raise ValidationError(f"cannot write metrics to {path}: {e}") from e


# --- feature-map distortion report --------------------------------------------

PSNR_CAP_DB = 99.0


def _center_crop(image, h, w):
    ih, iw = image.shape
    top, left = (ih - h) // 2, (iw - w) // 2
    return image[top : top + h, left : left + w]


def distortion_metrics(original, feature_map):
    """Numeric stand-ins for the paper-style visual comparison.

    Per channel: Pearson correlation against the center-cropped original
    (zero-variance channels score 0), and PSNR of the best least-squares
    affine reconstruction a*channel + b (capped at 99 dB)."""
    if len(original.shape) != 3 or original.shape[0] != 1:
        raise ValidationError(f"original must be [1,H,W], got {list(original.shape)}")
    if len(feature_map.shape) != 3:
        raise ValidationError(
            f"feature map must be [F,h,w], got {list(feature_map.shape)}"
        )
    f, h, w = feature_map.shape
    if h > original.shape[1] or w > original.shape[2]:
        raise ValidationError("feature map is larger than the original image")
    ref = _center_crop(original.data[0].astype(np.float64), h, w).ravel()
    ref_var = ref.var()
    channels = []
    for c in range(f):
        ch = feature_map.data[c].astype(np.float64).ravel()
        if ch.var() == 0.0 or ref_var == 0.0:
            corr = 0.0
            a, b = 0.0, float(ref.mean())
        else:
            corr = float(np.corrcoef(ref, ch)[0, 1])
            a, b = np.polyfit(ch, ref, 1)
        mse = float(np.mean((a * ch + b - ref) ** 2))
        psnr = PSNR_CAP_DB if mse <= 0 else min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))
        channels.append({"channel": c, "correlation": corr, "psnr_db": psnr})
    abs_corr = [abs(c["correlation"]) for c in channels]
    return {
        "channels": channels,
        "mean_abs_correlation": float(np.mean(abs_corr)),
        "max_abs_correlation": float(max(abs_corr)),
        "best_psnr_db": float(max(c["psnr_db"] for c in channels)),
    }


def dump_feature_channels(feature_map, out_dir):
    """Write each channel as a min-max normalized PGM for visual inspection."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for c in range(feature_map.shape[0]):
        ch = feature_map.data[c].astype(np.float64)
        span = ch.max() - ch.min()
        norm = (ch - ch.min()) / span if span > 0 else np.zeros_like(ch)
        path = os.path.join(out_dir, f"channel_{c:02d}.pgm")
        D.write_pgm(path, norm)
        paths.append(path)
    return paths


def feature_map_report(front, image, out_dir):
    """Run the front on one image, dump channels, and write report.json."""
    batch = Tensor(image.data.reshape((1,) + tuple(image.shape)))
    fm, _ = nn.forward(front, batch)
    fm_single = Tensor(fm.data[0])
    report = distortion_metrics(image, fm_single)
    paths = dump_feature_channels(fm_single, out_dir)
    report["channel_dumps"] = [os.path.basename(p) for p in paths]
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report
