import numpy as np
import pytest

from exitnas import genome as G
from exitnas import surrogate as S
from exitnas.errors import ContractViolation, InsufficientDataError, ModelStateError


SPACE = G.SearchSpace()


class FakeEntry:
    def __init__(self, genome, error, macs):
        self.genome = genome
        self.measured_error = error
        self.measured_average_macs = macs


def _archive(seed, n, error_fn=None, macs_fn=None):
    rng = np.random.default_rng(seed)
    entries = []
    for _ in range(n):
        g = G.sample_genome(SPACE, int(rng.integers(1 << 30)))
        vec = G.encode(g, SPACE)
        error = error_fn(vec, rng) if error_fn else float(rng.uniform(0.05, 0.6))
        macs = macs_fn(vec, rng) if macs_fn else float(rng.uniform(0.5e6, 60e6))
        entries.append(FakeEntry(g, error, macs))
    return entries


def test_fit_requires_two_entries():
    with pytest.raises(InsufficientDataError):
        S.fit(_archive(0, 1), SPACE)


def test_fit_rejects_nonfinite_targets():
    archive = _archive(1, 4)
    archive[2].measured_error = float("nan")
    with pytest.raises(ContractViolation):
        S.fit(archive, SPACE)


def test_constant_target_archive_converges_to_constant():
    archive = _archive(2, 12, error_fn=lambda v, r: 0.37, macs_fn=lambda v, r: 4.2e6)
    pair = S.fit(archive, SPACE, seed=3)
    for entry in archive[:5]:
        err, macs = S.predict(pair, entry.genome, SPACE)
        assert abs(err - 0.37) < 1e-3
        assert abs(macs - 4.2) < 1e-3


def test_training_loss_decreases():
    archive = _archive(3, 40)
    pair = S.fit(archive, SPACE, seed=4)
    assert pair.error_loss_curve[-1] <= pair.error_loss_curve[0]
    assert pair.macs_loss_curve[-1] <= pair.macs_loss_curve[0]


def test_fit_deterministic_under_seed():
    archive = _archive(5, 20)
    probes = [G.sample_genome(SPACE, s) for s in range(900, 910)]
    pair_a = S.fit(archive, SPACE, seed=7)
    pair_b = S.fit(archive, SPACE, seed=7)
    for g in probes:
        assert S.predict(pair_a, g, SPACE) == S.predict(pair_b, g, SPACE)


def test_predict_identical_genomes_identical_outputs():
    archive = _archive(6, 10)
    pair = S.fit(archive, SPACE, seed=1)
    g = G.sample_genome(SPACE, 77)
    assert S.predict(pair, g, SPACE) == S.predict(pair, g, SPACE)


def test_predict_clamps_error():
    archive = _archive(8, 10)
    pair = S.fit(archive, SPACE, seed=2)
    # force raw outputs far outside the domain through the output bias
    pair.error_model.biases[-1][:] = -50.0
    err, macs = S.predict(pair, G.sample_genome(SPACE, 3), SPACE)
    assert err == 0.0
    pair.error_model.biases[-1][:] = +50.0
    err, _ = S.predict(pair, G.sample_genome(SPACE, 3), SPACE)
    assert err == 1.0
    assert macs >= 0.0


def test_predict_unfitted_raises():
    with pytest.raises(ModelStateError):
        S.predict(S.SurrogatePair(), G.sample_genome(SPACE, 0), SPACE)


def test_memorizes_tiny_archive_with_big_budget():
    # overfit-on-trainset sanity oracle: 5 entries, generous training
    archive = _archive(9, 5)
    hyper = S.SurrogateHyper(hidden=(64, 64), learning_rate=0.05, epochs=4000)
    pair = S.fit(archive, SPACE, hyper=hyper, seed=11)
    for entry in archive:
        err, macs = S.predict(pair, entry.genome, SPACE)
        assert abs(err - entry.measured_error) < 0.05
        assert abs(macs - entry.measured_average_macs / 1e6) < \
            0.05 * max(1.0, entry.measured_average_macs / 1e6)


def test_serialization_roundtrip():
    archive = _archive(10, 15)
    pair = S.fit(archive, SPACE, seed=13)
    blob = pair.to_dict()
    restored = S.SurrogatePair.from_dict(blob)
    for seed in range(5):
        g = G.sample_genome(SPACE, seed)
        assert S.predict(pair, g, SPACE) == S.predict(restored, g, SPACE)


def test_scaling_is_part_of_the_model():
    # refitting the bare network on the already-scaled matrix with the same
    # seeds reproduces the pipeline's predictions exactly
    archive = _archive(12, 14)
    pair = S.fit(archive, SPACE, seed=21)
    features = np.array([G.encode(e.genome, SPACE) for e in archive], dtype=float)
    x = pair.feature_scaler.transform(features)
    err = np.array([e.measured_error for e in archive])
    y = pair.error_scaler.transform(err)

    seed_rng = np.random.default_rng(21)
    seeds = [int(seed_rng.integers(1 << 62)) for _ in range(4)]
    manual = S.TinyMLP(x.shape[1], (64, 64), seed=seeds[0])
    manual.fit_data(x, y, S.SurrogateHyper(), seed=seeds[2])
    probe = x[:4]
    assert np.array_equal(manual.predict(probe), pair.error_model.predict(probe))


def test_one_hot_feature_option():
    archive = _archive(14, 12)
    pair = S.fit(archive, SPACE, hyper=S.SurrogateHyper(one_hot=True), seed=5)
    assert pair.one_hot
    # one-hot width is the total option count across all genes
    from exitnas.genome import gene_layout
    assert pair.error_model.input_dim == sum(len(o) for _, o in gene_layout(SPACE))
    g = G.sample_genome(SPACE, 50)
    err, macs = S.predict(pair, g, SPACE)
    assert 0.0 <= err <= 1.0 and macs >= 0.0
    restored = S.SurrogatePair.from_dict(pair.to_dict())
    assert S.predict(restored, g, SPACE) == (err, macs)


def _relative_gradient_error(model, x, y, eps=1e-6):
    _, analytic = model.loss_and_grads(x, y)
    numeric = S.numerical_gradients(model, x, y, eps=eps)
    worst = 0.0
    n_layers = len(model.weights)
    numeric_w = numeric[:n_layers]
    numeric_b = numeric[n_layers:]
    for (gw, gb), nw, nb in zip(analytic, numeric_w, numeric_b):
        for a, f in ((gw, nw), (gb, nb)):
            denom = np.maximum(np.abs(a) + np.abs(f), 1e-8)
            worst = max(worst, float(np.max(np.abs(a - f) / denom)))
    return worst


def test_gradient_check_small_networks():
    rng = np.random.default_rng(2718)
    for case in range(20):
        d = int(rng.integers(2, 9))
        h = int(rng.integers(2, 9))
        n = int(rng.integers(3, 12))
        model = S.TinyMLP(d, (h, h), seed=int(rng.integers(1 << 30)))
        x = rng.normal(size=(n, d))
        y = rng.normal(size=n)
        assert _relative_gradient_error(model, x, y) <= 1e-4
