"""Quick end-to-end check of the pyjebm bindings on a tiny model.

Run after `pip install --no-build-isolation -e crates/python`:

    python crates/python/python/smoke_test.py
"""

import math
import tempfile

import pyjebm

CONFIG = """
schema_version = 1

[model]
latent_dims = [2, 2]
data_dim = 2
energy_hidden = [8]
conditional_hidden = []
decoder_hidden = [8]
encoder_hidden = [8]

[prior_sampler]
steps = 5

[posterior_sampler]
steps = 5
step_size = 0.05

[trainer]
mode = "two_stage"
iterations = 20
batch_size = 16
seed = 3
log_every = 5

[data]
source = "mixture"
n = 64
"""


def main():
    x, labels = pyjebm.gen_data(CONFIG)
    assert len(x) == 64 and len(x[0]) == 2
    assert labels is not None and len(labels) == 64

    model, stats = pyjebm.train(CONFIG)
    assert model.latent_dims == [2, 2] and model.data_dim == 2
    assert [s["iter"] for s in stats] == list(range(1, 21))
    assert all(math.isfinite(s["recon"]) for s in stats)

    samples = model.sample(10, seed=1)
    assert samples == model.sample(10, seed=1)
    assert len(samples) == 10 and all(math.isfinite(v) for row in samples for v in row)

    z = model.infer(x[:5])
    assert [len(layer) for layer in z] == [5, 5]
    assert len(model.log_prior(z)) == 5

    gauss = model.without_energy()
    assert gauss.log_prior(z) != model.log_prior(z)

    near = model.ood_scores(x[:20], k=0, seed=2)
    far = model.ood_scores([[8.0, 8.0]] * 20, k=0, seed=2)
    assert all(v == 0.0 for v in model.llr_scores(x[:5], k=0))
    print("auroc near vs far: %.3f" % pyjebm.auroc(near, far))
    assert pyjebm.auroc([1.0, 2.0], [0.0]) == 1.0

    with tempfile.TemporaryDirectory() as d:
        model.save(d + "/ck")
        again = pyjebm.Model.load(d + "/ck")
        assert again.sample(3, seed=4) == model.sample(3, seed=4)

    try:
        model.infer([[1.0, 2.0, 3.0]])
    except ValueError:
        pass
    else:
        raise AssertionError("bad row width accepted")
    print("pyjebm smoke test passed")


if __name__ == "__main__":
    main()
