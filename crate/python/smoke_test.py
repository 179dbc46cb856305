"""Smoke test for the dualbranch Python extension.

Build and install first, e.g. `maturin develop -m crates/python/Cargo.toml`.
"""

import json
import os
import sys
import tempfile

import dualbranch as db


def check(cond, what):
    if not cond:
        sys.exit(f"FAIL: {what}")
    print(f"ok  {what}")


def main():
    check(db.roc_auc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]) == 0.75, "roc_auc")
    diag_s = [float(i // 2) for i in range(40)]
    diag_y = [i % 2 == 0 for i in range(40)]
    check(abs(db.partial_auc_ratio(diag_s, diag_y) - 0.1) < 1e-9, "partial_auc_ratio on the diagonal")
    check(abs(db.specificity_at(diag_s, diag_y, 0.85) - 0.15) < 1e-9, "specificity_at on the diagonal")
    check(db.iom((0, 0, 64, 64), (32, 32, 64, 64)) == 0.25, "iom")
    try:
        db.roc_auc([0.1, 0.2], [True, True])
        check(False, "single-class labels rejected")
    except ValueError:
        check(True, "single-class labels rejected")

    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data")
        counts = db.synth(data, seed=3, n=12)
        check(sum(counts) == 12, f"synth label counts {counts}")

        cfg = db.RunConfig()
        for key, value in [("epochs", "2"), ("batch_size", "4"), ("hidden_dim", "16"),
                           ("augment", "false"), ("folds", "2"), ("data", data)]:
            cfg.set(key, value)
        check(cfg.get("epochs") == "2", "RunConfig set/get")
        try:
            cfg.set("epoch", "3")
            check(False, "unknown key rejected")
        except ValueError:
            check(True, "unknown key rejected")

        features = os.path.join(tmp, "features.bin")
        regions = db.extract(data, features, cfg)
        check(len(regions) == 12 and all(r > 0 for r in regions), "extract")

        run = os.path.join(tmp, "run")
        digest = db.train(cfg, run)
        check(len(digest) > 0, f"train, fold hash {digest}")

        report = json.loads(db.evaluate(run, "mb-vs-n"))
        auc = report["auroc"]["mean"]
        check(0.0 <= auc <= 1.0, f"evaluate, MB vs N AUROC {auc:.3f}")

        model = db.Model.load(os.path.join(run, "fold0", "best.ckpt"))
        rows = [[0.01 * (i + j) for j in range(model.input_dim)] for i in range(5)]
        (p_m, p_b), loc = model.predict(rows)
        check(0.0 <= p_m <= 1.0 and 0.0 <= p_b <= 1.0 and len(loc) == 5, f"predict ({p_m:.3f}, {p_b:.3f})")

        fresh = db.Model.init(8, hidden_dim=4, mode="max-region", k=3, seed=1)
        path = os.path.join(tmp, "fresh.ckpt")
        fresh.save(path)
        again = db.Model.load(path)
        x = [[0.1 * j for j in range(8)]] * 3
        check(again.mode == "max-region" and again.predict(x) == fresh.predict(x), "checkpoint roundtrip")
    print("all checks passed")


if __name__ == "__main__":
    main()
