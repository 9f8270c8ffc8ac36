"""Fit temperatures for teachers of increasing width on noisy synthetic data.

Prints a before/after table (Optimal Temp, ECE, NLL) per teacher width,
averaged over seeds, on the validation split used for fitting.

    python scripts/calibration_study.py --widths 32 256 2048 --seeds 5
"""

import argparse

import numpy as np

from calikd import calibration as cal, data, nnet
from calikd.report import table2_text


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--widths", type=int, nargs="+", default=[32, 256, 2048])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--noise", type=float, default=0.15)
    ap.add_argument("--samples", type=int, default=4000)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--bins", type=int, default=cal.DEFAULT_BINS)
    args = ap.parse_args()

    spec = data.SyntheticSpec(cluster_spread=0.6, label_noise_rate=args.noise, samples=args.samples)
    train, val, _ = data.split(data.generate_synthetic(spec), (0.8, 0.1, 0.1), 0)
    columns = {}
    for width in args.widths:
        rows = []
        for seed in range(args.seeds):
            model, _ = nnet.train(nnet.MlpModel.init([train.dims, width, train.class_count], seed), train,
                                  nnet.TrainConfig(max_epochs=args.epochs, seed=seed))
            logits = cal.model_logits(model, val)
            rep = cal.calibration_report(logits, cal.fit_temperature(logits), args.bins)
            rows.append(list(rep.table_row().values()))
        mean = np.mean(rows, axis=0)
        columns[str(width)] = dict(zip(cal.TABLE_ROWS, mean))
        print(f"width {width}: done ({args.seeds} seeds)", flush=True)
    print(table2_text(columns), end="")


if __name__ == "__main__":
    main()
