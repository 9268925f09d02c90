"""Smoke test for the hybrid_vae extension module."""

import math
import sys

import hybrid_vae as hv


def main() -> int:
    ds = hv.Dataset.synthesize(n=16, m=32, t=8, image_side=8, num_landmarks=2, seed=1)
    assert ds.sizes == (16, 32, 8), ds.sizes
    assert (ds.d_dim, ds.h_dim) == (64, 4)
    d, h = ds.test()[0]
    assert len(d) == 64 and len(h) == 4

    model = hv.Model(ds.d_dim, ds.h_dim, 2, hidden_width=8, seed=3)
    assert model.dims == (64, 4, 2)
    assert model.num_parameters > 0
    assert "predictor.0.weight" in model.block_names()

    lf = model.elbo_full(d, h, s_z=3, seed=0)
    lp = model.elbo_partial(d, s_z=3, s_h=3, seed=0)
    assert math.isfinite(lf) and math.isfinite(lp)
    assert lf == model.elbo_full(d, h, s_z=3, seed=0), "estimates are deterministic per seed"

    loss = model.hybrid_loss(ds.labeled()[:4], ds.unlabeled()[:4])
    assert math.isfinite(loss)

    trained, ledger = hv.train(ds, model, mode="hybrid", epochs=4, batch_size=4, eval_every=4, s_z=1, s_h=1)
    assert ledger[0]["step"] == 0 and ledger[-1]["step"] == 16, ledger
    assert ledger[-1]["task_loss"] is not None
    assert trained.test_nll(ds, s_z=1, seed=0) == ledger[-1]["test_nll"]

    samples = trained.sample(3, seed=2)
    assert len(samples) == 3 and len(samples[0][0]) == 64
    path = trained.interpolate(ds.test()[0], ds.test()[1], steps=4)
    assert len(path) == 4
    assert len(trained.predict(d)) == 4

    try:
        hv.Model(0, 1, 1)
    except ValueError:
        pass
    else:
        raise AssertionError("zero dimensions must be rejected")

    checks = hv.verify(draws=1)
    failed = [c for c in checks if not c[1]]
    for name, ok, detail in checks:
        print(("PASS " if ok else "FAIL ") + name + ": " + detail)
    print("smoke test:", "ok" if not failed else "FAILED")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
