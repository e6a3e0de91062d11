import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import cosine, cross_entropy_literal, infonce_literal
from selfstrae.errors import VocabError
from selfstrae.model import ModelConfig, Objective, new_model
from selfstrae.objectives import (
    DIAGNOSTICS,
    build_loss,
    check_objective_gradients,
    dropout_masks,
    encode_batch,
    loss_ce,
    loss_ceco,
    loss_contrastive,
    loss_strcse,
    random_tiny_case,
)

ALL = [Objective.CE, Objective.CONTRASTIVE, Objective.CECO, Objective.STRCSE]


# -- cross-entropy ------------------------------------------------------------------

def test_ce_uniform_is_log_v():
    for V in (2, 4, 1000):
        assert abs(loss_ce(np.zeros((3, V)), [0, 1, V - 1]) - math.log(V)) < 1e-12


def test_ce_saturated_and_hand_value():
    assert loss_ce([[0.0, 1000.0, 0.0]], [1]) < 1e-12
    expected = -math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3)))
    assert loss_ce([[1.0, 2.0, 3.0]], [2]) == pytest.approx(expected, abs=1e-14)
    assert round(expected, 4) == 0.4076


def test_ce_matches_literal_oracle(rng):
    logits = rng.normal(size=(9, 7)) * 3
    targets = rng.integers(0, 7, 9)
    assert loss_ce(logits, targets) == pytest.approx(cross_entropy_literal(logits.tolist(), targets), abs=1e-13)


def test_ce_target_out_of_range():
    with pytest.raises(VocabError):
        loss_ce(np.zeros((1, 4)), [4])


# -- contrastive ---------------------------------------------------------------------

@pytest.mark.parametrize("fused", [True, False])
def test_contrastive_single_pair_is_zero(fused, rng):
    assert loss_contrastive(rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), 1.2, fused) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("fused", [True, False])
def test_contrastive_orthogonal_identity_hand_value(fused):
    I = np.eye(2)
    val = loss_contrastive(I, I, 1.0, fused)
    assert val == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-14)
    assert abs(val - 0.3133) < 1e-4


@pytest.mark.parametrize("fused", [True, False])
def test_contrastive_matches_literal_oracle(fused):
    rng = np.random.default_rng(7)
    for _ in range(200):
        M, E = int(rng.integers(1, 7)), int(rng.integers(1, 6))
        up, down = rng.normal(size=(M, E)), rng.normal(size=(M, E))
        tau = float(rng.uniform(0.1, 3.0))
        assert abs(loss_contrastive(up, down, tau, fused) - infonce_literal(up, down, tau)) < 1e-10


def test_contrastive_empty_is_zero_and_counted():
    before = DIAGNOSTICS["contrastive_skipped"]
    assert loss_contrastive(np.zeros((0, 3)), np.zeros((0, 3)), 1.0) == 0.0
    assert DIAGNOSTICS["contrastive_skipped"] == before + 1


@given(st.integers(0, 10**6), st.integers(2, 8))
@settings(max_examples=60, deadline=None)
def test_contrastive_permutation_and_scale_invariance(seed, M):
    rng = np.random.default_rng(seed)
    up, down = rng.normal(size=(M, 4)), rng.normal(size=(M, 4))
    base = loss_contrastive(up, down, 0.7)
    perm = rng.permutation(M)
    assert loss_contrastive(up[perm], down[perm], 0.7) == pytest.approx(base, abs=1e-12)
    s1, s2 = rng.uniform(0.01, 100, (M, 1)), rng.uniform(0.01, 100, (M, 1))
    assert loss_contrastive(up * s1, down * s2, 0.7) == pytest.approx(base, abs=1e-12)
    assert base >= 0.0


def test_dense_kernel_constant_shift_is_exact_for_large_blocks():
    # many rows and a forced small block size exercise the row-blocked path
    rng = np.random.default_rng(3)
    up, down = rng.normal(size=(150, 6)), rng.normal(size=(150, 6))
    from selfstrae.autograd import Tape

    t = Tape()
    a, b = t.param("a", up), t.param("b", down)
    blocked = t.info_nce(t.normalize(a), t.normalize(b), 0.05, block=7)
    assert float(t.value(blocked)) == pytest.approx(infonce_literal(up, down, 0.05), rel=1e-11)


# -- full objectives on a batch ---------------------------------------------------------

def _case(seed, objective, tied=False):
    cfg = ModelConfig(V=30, E=6, k=3, u=2, tied=tied, tau=1.1, dropout_p=0.25, objective=objective)
    p = new_model(cfg, seed)
    rng = np.random.default_rng(seed)
    p = p.replace_arrays({n: a + 0.1 * rng.normal(size=a.shape) for n, a in p.as_dict().items()})
    sents = [rng.integers(0, 30, int(rng.integers(1, 9))) for _ in range(5)]
    return p, sents


def _literal_parts(p, sents, internal_only):
    batch = encode_batch(p, sents)
    leaves = batch.leaf_nodes
    logits = batch.down[leaves] @ p.dembed_matrix
    ce = cross_entropy_literal(logits.tolist(), batch.leaf_targets[leaves])
    sel = batch.internal_mask if internal_only else np.ones(batch.M, bool)
    cont = infonce_literal(batch.up[sel], batch.down[sel], p.config.tau) if sel.any() else 0.0
    return batch, logits, ce, cont


@pytest.mark.parametrize("tied", [False, True])
def test_ceco_is_mean_of_independent_parts(tied):
    for seed in range(5):
        p, sents = _case(seed, "ceco", tied)
        batch, logits, ce, cont = _literal_parts(p, sents, internal_only=True)
        g = build_loss(p, sents)
        assert g.value == pytest.approx(0.5 * (ce + cont), abs=1e-12)
        assert g.value == 0.5 * (g.parts["ce"] + g.parts["contrastive"])
        assert abs(g.value - 0.5 * (g.parts["ce"] + g.parts["contrastive"])) <= 1e-15
        assert loss_ceco(batch, logits, p.config.tau) == pytest.approx(g.value, abs=1e-12)


def test_ce_and_contrastive_objectives_match_literal():
    p, sents = _case(11, "ce")
    _, _, ce, cont_all = _literal_parts(p, sents, internal_only=False)
    assert build_loss(p, sents, "ce").value == pytest.approx(ce, abs=1e-12)
    assert build_loss(p, sents, "contrastive").value == pytest.approx(cont_all, abs=1e-12)


def test_root_is_its_own_positive_under_all_node_contrastive():
    p, sents = _case(4, "contrastive")
    batch = encode_batch(p, sents)
    for r in batch.forest.roots:
        assert cosine(batch.up[r], batch.down[r]) == pytest.approx(1.0, abs=1e-15)


def test_single_token_batch_ceco_is_half_ce():
    p, _ = _case(0, "ceco")
    sents = [np.array([3]), np.array([7])]
    before = DIAGNOSTICS["contrastive_skipped"]
    g = build_loss(p, sents)
    assert g.parts["contrastive"] == 0.0
    assert g.value == pytest.approx(0.5 * g.parts["ce"], abs=1e-15)
    assert DIAGNOSTICS["contrastive_skipped"] > before
    assert np.isfinite(g.backward().params["Psi"]).all()


def test_per_sentence_ce_weighting():
    p, sents = _case(5, "ce")
    batch = encode_batch(p, sents)
    logits = batch.down[batch.leaf_nodes] @ p.dembed_matrix
    targets = batch.leaf_targets[batch.leaf_nodes]
    per, a = [], 0
    for s in sents:
        per.append(cross_entropy_literal(logits[a:a + len(s)].tolist(), targets[a:a + len(s)]))
        a += len(s)
    assert build_loss(p, sents, "ce", per_sentence_ce=True).value == pytest.approx(np.mean(per), abs=1e-12)


def test_out_of_range_token_rejected():
    p, _ = _case(0, "ce")
    with pytest.raises(VocabError):
        build_loss(p, [np.array([1, 30])])


# -- StrCSE ----------------------------------------------------------------------------------

def test_strcse_without_dropout_reduces_to_shared_decoder():
    p, sents = _case(6, "strcse")
    g = build_loss(p, sents, dropout_p=0.0)
    batch, _, ce, _ = _literal_parts(p, sents, internal_only=True)
    d = batch.down[batch.internal_mask]
    assert g.parts["ce"] == pytest.approx(ce, abs=1e-12)
    assert g.parts["contrastive"] == pytest.approx(infonce_literal(d, d, p.config.tau), abs=1e-12)
    assert g.value == pytest.approx(0.5 * (ce + infonce_literal(d, d, p.config.tau)), abs=1e-12)


def test_strcse_single_token_batch_has_no_contrastive_term():
    p, _ = _case(0, "strcse")
    g = build_loss(p, [np.array([3]), np.array([9])], seed=1)
    assert g.parts["contrastive"] == 0.0


def test_strcse_reproducible_and_seed_sensitive():
    p, sents = _case(8, "strcse")
    a = loss_strcse(p, sents, seed=[1, 2, 3])
    assert a == loss_strcse(p, sents, seed=[1, 2, 3])
    assert a != loss_strcse(p, sents, seed=[1, 2, 4])


def test_dropout_masks_inverted_scaling():
    m1, m2 = dropout_masks((400, 50), 0.3, 0)
    assert set(np.unique(m1)) <= {0.0, 1 / 0.7}
    assert abs(m1.mean() - 1.0) < 0.02 and np.any(m1 != m2)
    ones = dropout_masks((3, 2), 0.0, 0)
    assert all(np.array_equal(m, np.ones((3, 2))) for m in ones)


def test_strcse_pairs_internal_nodes_by_merge_step():
    p, sents = _case(9, "strcse")
    g = build_loss(p, sents, seed=5)
    f1, f2 = g.forests
    assert np.array_equal(f1.internal_nodes, f2.internal_nodes)
    assert len(f1.internal_nodes) == sum(len(s) - 1 for s in sents)


# -- losses stay finite and non-negative --------------------------------------------------------

@pytest.mark.parametrize("objective", ALL)
def test_losses_finite_non_negative(objective):
    for seed in range(5):
        p, sents = _case(seed, objective)
        g = build_loss(p, sents, objective, seed=seed)
        assert np.isfinite(g.value) and g.value >= 0.0


# -- dual route: fused dense ops vs primitive op chain --------------------------------------------

@pytest.mark.parametrize("objective", ALL)
def test_fused_and_primitive_routes_agree(objective):
    for seed in range(4):
        p, sents = _case(seed, objective, tied=bool(seed % 2))
        a = build_loss(p, sents, objective, seed=seed, fused=True)
        b = build_loss(p, sents, objective, seed=seed, fused=False, forests=a.forests, masks=a.masks)
        assert a.value == pytest.approx(b.value, abs=1e-12)
        ga, gb = a.backward().params, b.backward().params
        for n in ga:
            assert np.allclose(ga[n], gb[n], rtol=1e-10, atol=1e-13), n


# -- gradients against finite differences (quick version; the full run is an acceptance test) ------

@pytest.mark.parametrize("fused", [True, False])
@pytest.mark.parametrize("objective", ALL)
def test_objective_gradients(objective, fused):
    check = check_objective_gradients(objective, n_configs=4, seed=3, fused=fused)
    assert check.passed, check


def test_random_tiny_case_shapes():
    p, sents = random_tiny_case(0)
    assert p.config.V == 20 and p.config.k == 4 and p.config.u == 3
    assert all(1 <= len(s) <= 6 for s in sents)
