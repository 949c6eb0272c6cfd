"""Smoke test for the sami_py extension module.

Build first:  maturin develop -m crates/python/Cargo.toml --release
"""

import math
import os
import tempfile

import sami_py


def main():
    sched = sami_py.Schedule("linear", 400)
    assert sched.levels == 400
    assert abs(sched.beta[0] - 1e-4) < 1e-12
    assert abs(sched.alpha_bar[-1] - 0.018) < 0.005
    assert sched.gamma(10) > 0.0

    assert sami_py.kl_to_standard_normal([0.0, 0.0], [1.0, 1.0]) == 0.0
    kl = sami_py.kl_to_standard_normal([1.0], [2.0])
    assert abs(kl - 0.5 * (2.0 + 1.0 - 1.0 - math.log(2.0))) < 1e-12

    pixels, shape, factors = sami_py.generate_disks(12, seed=3, size=16, radius=4.0)
    assert shape == [12, 1, 16, 16]
    assert len(pixels) == 12 * 256 and len(factors) == 12
    assert min(pixels) >= 0.0 and max(pixels) <= 1.0

    report = sami_py.oracle_check(levels=50, chains=500, seed=0)
    assert report["miyasawa_error"] < 1e-8, report
    assert report["bayes_error"] < 1e-8, report

    model = sami_py.Model(seed=1, image_size=16, levels=12, denoiser_base=2,
                          denoiser_mult=[1, 2], encoder_base=2, encoder_mult=[1, 2])
    assert model.image_size == 16 and model.latent_dim == 3
    x = [2.0 * p - 1.0 for p in pixels]
    losses = model.train(x, shape, epochs=1, batch_size=4, learning_rate=1e-3, seed=0)
    assert len(losses) == 3 and all(math.isfinite(l) for l in losses)

    mean, var = model.encode(x[:256], [1, 1, 16, 16])
    assert len(mean) == 3 and all(v > 0.0 for v in var)

    uncond = model.sample(2, seed=5)
    assert len(uncond) == 2 * 256
    cond = model.sample_conditional(x[:256], 2, seed=5, mask=[True, False, True])
    assert len(cond) == 2 * 256
    lat = model.sample_conditional([0.0, 0.5, -0.5], 1, seed=5, latent=True, rule="algorithm")
    assert len(lat) == 256
    assert model.sample(2, seed=5) == uncond

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        model.save(path)
        again = sami_py.Model.load(path)
        assert again.sample(2, seed=5) == uncond
        assert sami_py.run_cli(["--help"]) == 0
        assert sami_py.run_cli(["no-such-command"]) == 2

    print("sami_py smoke test ok")


if __name__ == "__main__":
    main()
