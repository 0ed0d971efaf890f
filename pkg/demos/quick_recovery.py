"""Recover vehicle parameters from a synthetic drive with a known answer.

Generates a noiseless 10 Hz log from fixed ground truth, trains a narrow
operator for a short schedule, and prints recovered baselines next to the
truth. Runs in under a minute; raise the widths and epochs for tighter numbers.

    python demos/quick_recovery.py
"""

import numpy as np

from evpino.dataset import build_datasets
from evpino.evaluation import metrics, predict_log
from evpino.operator import OperatorConfig, OperatorModel
from evpino.physics import BASELINE_NAMES, VehicleSpec
from evpino.synth import SynthConfig, gen_log
from evpino.training import TrainConfig, fit

truth = SynthConfig(cd=0.23, crr=0.0096, mass=1977.0, paux=1000.0, eta=0.83, mu=0.74)
drive = gen_log(truth)
train, val = build_datasets(drive, L=128, stride=32)

# a slim trunk keeps the demo quick; warm-up alone does most of the identification
model = OperatorModel(OperatorConfig(width=16, n_layers=2, lift_hidden=32), seed=0)
spec = VehicleSpec()
model, report = fit(model, train, val, spec, TrainConfig(warmup_epochs=400, max_epochs=460))

got = {k: float(np.asarray(getattr(v, "data", v))) for k, v in model.baselines(spec).items()}
print(f"{'param':6s} {'truth':>10s} {'recovered':>10s}")
for name in BASELINE_NAMES:
    print(f"{name:6s} {getattr(truth, name):10.4g} {got[name]:10.4g}")

pred = predict_log(model, drive, spec, train.scaler)
rep = metrics(pred.p_true, pred.p_pred)
print(f"stitched MAE {rep.mae * 1000:.1f} W over {rep.n} samples; "
      f"best validation MSE {report.best_val:.3g} kW^2 ({report.stop_reason})")
