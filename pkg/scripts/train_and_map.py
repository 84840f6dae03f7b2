#!/usr/bin/env python
"""Train the full model on the synthetic task, then draw influence maps for a few test samples.

    python scripts/train_and_map.py --out results/demo --samples 4
"""
import argparse
from pathlib import Path

from itcrwkv import tensor as T
from itcrwkv.heatmap import ImportanceMapConfig, render_importance, write_field_csv, write_ppm
from itcrwkv.model import forward_model
from itcrwkv.synth import SynthConfig, save_dataset, split
from itcrwkv.train import (TrainConfig, evaluate, save_checkpoint, train, write_history_csv,
                           write_summary)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/demo")
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--samples", type=int, default=4)
    ap.add_argument("--sigma", type=float, default=15.0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    data = SynthConfig()
    tr, va, te = split(data, (800, 200, 200))
    save_dataset(te, out / "test.bin", data)
    cfg = TrainConfig(lr=1e-4, width=32, depth=2, hidden=64, epochs=args.epochs)
    res = train(cfg, tr, va, n_classes=data.n_classes,
                log=lambda r: print(f"epoch {r['epoch']:3d} loss {r['train_loss']:.4f} "
                                    f"val wF1 {r['val_weighted_f1']:.4f}", flush=True))
    save_checkpoint(res.checkpoint, out / "checkpoint.bin")
    write_history_csv(res.history, out / "history.csv")
    metrics = evaluate(res.model, te)
    write_summary(metrics, out / "test_metrics.txt")
    print(f"test accuracy {metrics['accuracy']:.3f}, weighted F1 {metrics['weighted_f1']:.3f}")

    mcfg = ImportanceMapConfig(sigma=args.sigma)
    for k, s in enumerate(te[:args.samples]):
        with T.no_grad():
            fwd = forward_model(res.model, s.cells, s.grid)
        imap = render_importance(s.cells, s.grid, fwd.attention_in_input_order(), mcfg)
        write_ppm(out / f"map_{k:02d}.ppm", imap.image)
        write_field_csv(out / f"map_{k:02d}.csv", imap.field)
        print(f"sample {k}: label {s.label}, predicted {fwd.prediction.label}")


if __name__ == "__main__":
    main()
