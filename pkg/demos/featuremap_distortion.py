"""What actually leaves a client: render the cut-layer feature map.

Trains the classifier briefly, runs the client-side front on one synthetic
flame image, writes each of the 8 feature channels as a PGM, and prints the
per-channel correlation/PSNR report quantifying how distorted the transmitted
representation is relative to the raw image.
"""

import os
import tempfile

import numpy as np

from splitfire.data import synth_dataset
from splitfire.experiment import ExperimentConfig, feature_map_report, run_central
from splitfire.nn import SMALL_VGG_CUT_INDEX
from splitfire.split import cut_model
from splitfire.tensor import Tensor


def main():
    config = ExperimentConfig(arm="central", epochs=5, synth_n=200, seed=1)
    _, model = run_central(config, collect_model=True)
    front = cut_model(model, SMALL_VGG_CUT_INDEX).front

    ds = synth_dataset(16, 0.5, seed=1)
    flame_idx = int(np.flatnonzero(ds.labels == 1.0)[0])
    image, _ = ds.sample(flame_idx)

    out_dir = os.path.join(tempfile.gettempdir(), "splitfire-featuremap")
    report = feature_map_report(front, image, out_dir)

    print(f"channel dumps + report.json written to {out_dir}\n")
    print("channel  correlation   psnr_db")
    for ch in report["channels"]:
        print(f"  {ch['channel']:2d}     {ch['correlation']:+.4f}     {ch['psnr_db']:6.2f}")
    print(f"\nmean |correlation| {report['mean_abs_correlation']:.4f}, "
          f"best PSNR {report['best_psnr_db']:.2f} dB")
    print("the transmitted activations are a lossy, model-specific view of "
          "the input, not the raw pixels")


if __name__ == "__main__":
    main()
