"""The full operator workflow through the command-line interface.

Everything the CLI can do, in order: write a run config, pretrain both stages,
fine-tune with the cross-channel gate on auto, zero-shot forecast, evaluate
against the repeat-last baseline, and benchmark the scan kernels.
"""

import json
import os
import tempfile

from tsmamba import data as D
from tsmamba.cli import main

workdir = tempfile.mkdtemp(prefix="tsmamba-demo-")
print(f"working in {workdir}")

ds = D.synth_generate(
    5, 3, 2_000,
    [D.Sinusoid(freq=1 / 16, channel=0), D.Sinusoid(freq=1 / 24, phase=0.7, channel=1),
     D.Sinusoid(freq=1 / 32, phase=1.9, channel=2), D.Noise(sigma=0.08)],
)
data_path = os.path.join(workdir, "series.csv")
D.write_csv(ds, data_path)

config = {
    "seed": 4,
    "precision": "float32",
    "window_stride": 2,
    "model": {"horizon": 16, "lookback": 64, "patch_len": 8, "d_model": 24,
              "n_layers": 2, "d_state": 8, "head_compress_dim": 6},
    "stage1": {"epochs": 1, "batch_size": 64},
    "stage2": {"epochs": 1, "batch_size": 64},
    "finetune": {"epochs": 1, "batch_size": 16, "min_samples_for_xchannel": 100},
}
config_path = os.path.join(workdir, "config.json")
with open(config_path, "w") as fh:
    json.dump(config, fh, indent=2)

s1 = os.path.join(workdir, "stage1.ckpt")
s2 = os.path.join(workdir, "stage2.ckpt")
tuned = os.path.join(workdir, "finetuned.ckpt")

print("\n$ tsmamba pretrain --stage 1 ...")
assert main(["pretrain", "--stage", "1", "--config", config_path, "--data", data_path,
             "--out", s1, "--log", os.path.join(workdir, "stage1.log.csv")]) == 0

print("\n$ tsmamba pretrain --stage 2 ...")
assert main(["pretrain", "--stage", "2", "--config", config_path, "--data", data_path,
             "--init", s1, "--out", s2]) == 0

print("\n$ tsmamba finetune --xchannel auto ...")
assert main(["finetune", "--config", config_path, "--data", data_path, "--init", s2,
             "--xchannel", "auto", "--out", tuned]) == 0

print("\n$ tsmamba forecast ...")
forecast_csv = os.path.join(workdir, "forecast.csv")
assert main(["forecast", "--model", tuned, "--input", data_path, "--horizon", "16",
             "--out", forecast_csv]) == 0
print("first forecast rows:")
with open(forecast_csv) as fh:
    for line in list(fh)[:4]:
        print("  " + line.rstrip())

print("\n$ tsmamba evaluate (model) ...")
assert main(["evaluate", "--model", tuned, "--data", data_path, "--split", "test",
             "--horizons", "16"]) == 0

print("\n$ tsmamba evaluate (repeat-last baseline) ...")
assert main(["evaluate", "--model", tuned, "--data", data_path, "--split", "test",
             "--horizons", "16", "--baseline", "repeat_last"]) == 0

print("\n$ tsmamba bench-scan ...")
assert main(["bench-scan", "--len-list", "256,512,1024", "--d-inner", "32",
             "--n-state", "8", "--mode", "both", "--reps", "5"]) == 0
