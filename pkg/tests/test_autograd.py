import numpy as np
import pytest

from selfstrae.autograd import OPS, Tape, check_op_adjoints, grad_check, inject_fault
from selfstrae.errors import NumericError, UsageError
from selfstrae.model import ModelConfig, Objective, new_model
from selfstrae.objectives import build_loss


def test_sum_of_squares_gradient(rng):
    p = rng.normal(size=7)
    t = Tape()
    r = t.param("p", p)
    g = t.backward(t.sum(t.mul(r, r))).params["p"]
    assert np.allclose(g, 2 * p, rtol=0, atol=1e-15)


def test_cosine_with_itself_has_zero_gradient(rng):
    t = Tape()
    x = t.param("x", rng.normal(size=(1, 5)))
    loss = t.sum(t.cosine_matrix(x, x))
    assert t.value(loss) == pytest.approx(1.0)
    assert np.abs(t.backward(loss).params["x"]).max() < 1e-15


def test_non_scalar_loss_rejected(rng):
    t = Tape()
    x = t.param("x", rng.normal(size=3))
    with pytest.raises(UsageError):
        t.backward(t.scale(x, 2.0))


def test_quadratic_grad_check_is_tight(rng):
    A = rng.normal(size=(4, 4))

    def builder(arrays):
        t = Tape()
        x = t.param("x", arrays["x"])
        y = t.linear(x, t.const(A))
        return t, t.sum(t.mul(y, x))

    report = grad_check(builder, {"x": rng.normal(size=(2, 4))})
    assert report.max_rel_err < 1e-9 and report.passed


def test_grad_check_reports_non_finite_entry():
    def builder(arrays):
        t = Tape()
        x = t.param("x", arrays["x"])
        return t, t.sum(t.mul(x, t.const(np.array([1.0, np.inf]))))

    with pytest.raises(NumericError, match=r"x\["):
        grad_check(builder, {"x": np.array([0.5, 0.5])})


def test_every_op_adjoint_matches_finite_differences():
    errs = check_op_adjoints()
    assert set(errs) == set(OPS)
    for op, err in errs.items():
        assert err < 1e-7, op


@pytest.mark.parametrize("op", OPS)
def test_fault_injection_identifies_the_op(op):
    with inject_fault(op):
        errs = check_op_adjoints()
    bad = {o for o, e in errs.items() if e > 1e-5}
    assert bad == {op}


def test_inject_fault_rejects_unknown_op():
    with pytest.raises(UsageError):
        with inject_fault("conv2d"):
            pass


def _ceco_case(seed=0):
    cfg = ModelConfig(V=6, E=4, k=2, u=2, tau=0.9)
    p = new_model(cfg, seed)
    rng = np.random.default_rng(seed)
    return p.replace_arrays({n: a + 0.1 * rng.normal(size=a.shape) for n, a in p.as_dict().items()})


def test_full_ceco_three_token_sentence_matches_finite_differences():
    p = _ceco_case()
    sent = [np.array([1, 4, 2])]
    g = build_loss(p, sent, "ceco")

    def builder(arrays):
        gg = build_loss(p.replace_arrays(arrays), sent, "ceco", forests=g.forests)
        return gg.tape, gg.loss

    report = grad_check(builder, p.as_dict())
    assert report.max_rel_err < 1e-7, report.failing_entries[:3]


def test_backward_is_deterministic():
    p = _ceco_case(1)
    sents = [np.array([1, 4, 2, 5]), np.array([0, 3])]
    g1 = build_loss(p, sents).backward().params
    g2 = build_loss(p, sents).backward().params
    for n in g1:
        assert np.array_equal(g1[n], g2[n])


def test_gradient_accumulation_is_linear():
    p = _ceco_case(2)
    sents = [np.array([1, 4, 2, 5, 0])]
    ce = build_loss(p, sents, "ce")
    co = build_loss(p, sents, "contrastive", forests=ce.forests)
    both = Tape()
    # rebuild both losses on one tape so the adjoints accumulate into shared params
    from selfstrae.objectives import _ce_term, _contrastive_term, _encode_pass

    refs = {n: both.param(n, a) for n, a in p.as_dict().items()}
    leaves = both.lookup(refs["Psi"], np.concatenate(sents))
    forest, up, down = _encode_pass(both, refs, p, sents, leaves, ce.forests[0])
    total = both.add(_ce_term(both, refs, p, forest, down), _contrastive_term(both, up, down, p.config.tau))
    g = both.backward(total).params
    g_ce, g_co = ce.backward().params, co.backward().params
    for n in g:
        assert np.allclose(g[n], g_ce[n] + g_co[n], rtol=1e-12, atol=1e-15)


def test_unused_parameter_gradient_exactly_zero():
    p = _ceco_case(3)
    g = build_loss(p, [np.array([1, 4, 2])], Objective.CONTRASTIVE).backward().params
    assert g["Gamma"].shape == p.Gamma.shape and not g["Gamma"].any()
    assert g["Phi"].any()


def test_float32_dense_blocks_close_to_float64():
    p = new_model(ModelConfig(V=40, E=12, k=4, u=3), 0)
    rng = np.random.default_rng(0)
    sents = [rng.integers(0, 40, 9) for _ in range(6)]
    g64 = build_loss(p, sents, dense_dtype=np.float64)
    g32 = build_loss(p, sents, dense_dtype=np.float32, forests=g64.forests)
    assert g32.value == pytest.approx(g64.value, rel=1e-5)
    a, b = g64.backward().params, g32.backward().params
    for n in a:
        assert np.allclose(a[n], b[n], rtol=1e-3, atol=1e-5 * np.abs(a[n]).max())


def test_tape_rejects_other_dtypes():
    with pytest.raises(UsageError):
        Tape(np.float16)
