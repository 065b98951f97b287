import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seqrec import tensor as T
from seqrec.gradcheck import finite_diff_check
from seqrec.optim import Adam, AdamState, adam_update

try:
    import torch
except ImportError:  # reference comparisons only
    torch = None

needs_torch = pytest.mark.skipif(torch is None, reason="torch not installed")


def _param(rng, *shape, scale=1.0):
    return T.DiffArray(rng.normal(size=shape) * scale, requires_grad=True)


def _sq(t):
    return t * t


def _torch(a):
    return torch.tensor(a.values if isinstance(a, T.DiffArray) else a, dtype=torch.float64, requires_grad=True)


# ----------------------------------------------------------------- elementwise + reductions

@pytest.mark.parametrize("seed", range(5))
def test_composite_graph_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a, b = _param(rng, 3, 4), _param(rng, 4)

    def f():
        y = T.tanh(a * b) + T.sigmoid(a - b) * T.exp(a * 0.3)
        return T.sum(T.relu(y) + T.gelu(y) + T.log(T.exp(y) + 1.0)) / 7.0

    assert finite_diff_check(f, [a, b], seed=seed) < 1e-6


def test_shared_subexpression_accumulates():
    x = T.DiffArray(np.array([2.0, -1.0]), requires_grad=True)
    y = x * x + x
    T.sum(y * y).backward()
    v = x.values
    np.testing.assert_allclose(x.grad, 2 * (v * v + v) * (2 * v + 1))


def test_grad_accumulates_across_backward_calls():
    x = T.DiffArray(np.array([1.0, 2.0]), requires_grad=True)
    T.sum(x * 3.0).backward()
    T.sum(x * 3.0).backward()
    np.testing.assert_allclose(x.grad, [6.0, 6.0])


def test_broadcast_gradient_is_unbroadcast():
    rng = np.random.default_rng(0)
    a, b = _param(rng, 2, 3), _param(rng, 3)
    T.sum(a * b).backward()
    np.testing.assert_allclose(b.grad, a.values.sum(axis=0))
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.values, (2, 3)))


def test_no_grad_skips_graph():
    x = T.DiffArray(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_backward_requires_scalar_or_grad():
    x = T.DiffArray(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


@pytest.mark.parametrize("seed", range(5))
def test_take_reshape_transpose_concat_matmul_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a, b, c = _param(rng, 2, 3, 4), _param(rng, 4, 5), _param(rng, 2, 3, 4)

    def f():
        x = T.concat([a, c], axis=1)                     # (2, 6, 4)
        x = T.transpose(T.reshape(x, (2, 3, 2, 4)), (0, 2, 1, 3))
        y = T.matmul(T.reshape(x, (12, 4)), b)
        rows = T.take_rows(T.reshape(y, (12, 5)), np.array([0, 3, 7, 11]))
        return T.mean(_sq(T.take(rows, (slice(None), slice(1, 4))))) + T.sum(T.mean(a, axis=0))

    assert finite_diff_check(f, [a, b, c], seed=seed) < 1e-6


def test_embedding_scatter_adds_repeated_ids():
    table = T.DiffArray(np.arange(12.0).reshape(4, 3), requires_grad=True)
    out = T.embedding(table, np.array([[1, 1], [3, 0]]))
    T.sum(out).backward()
    np.testing.assert_allclose(table.grad, [[1, 1, 1], [2, 2, 2], [0, 0, 0], [1, 1, 1]])


def test_dropout_inverted_scaling_and_eval_identity():
    x = T.DiffArray(np.ones((200, 200)))
    out = T.dropout(x, 0.25, np.random.default_rng(0), train=True).values
    assert set(np.unique(out)) <= {0.0, 1 / 0.75}
    assert abs(out.mean() - 1.0) < 0.02
    assert T.dropout(x, 0.25, None, train=False) is x


# ----------------------------------------------------------------- softmax / layer norm

def test_softmax_reference_values():
    np.testing.assert_allclose(T.softmax([1.0, 2.0, 3.0]), [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_is_stable_for_huge_logits():
    out = T.softmax([1000.0, 1000.0])
    np.testing.assert_allclose(out, [0.5, 0.5])


@pytest.mark.parametrize("bad", [[], [1.0, float("nan")]])
def test_softmax_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        T.softmax(bad)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_sums_to_one_and_is_shift_invariant(v, c):
    p = T.softmax(v)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0)
    np.testing.assert_allclose(T.softmax(v + c), p, atol=1e-12)


def test_layer_norm_reference():
    out = T.layer_norm(np.array([1.0, 3.0]), np.ones(2), np.zeros(2), eps=0.0)
    np.testing.assert_allclose(out.values, [-1.0, 1.0])


def test_layer_norm_shape_mismatch():
    with pytest.raises(ValueError):
        T.layer_norm(np.ones((2, 3)), np.ones(2), np.zeros(2))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-10, 10)).filter(lambda a: np.all(a.std(axis=-1) > 1e-2)))
def test_layer_norm_output_is_standardised(x):
    out = T.layer_norm(x, np.ones(6), np.zeros(6), eps=0.0).values
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-9)


@needs_torch
@pytest.mark.parametrize("seed", range(5))
def test_layer_norm_matches_torch(seed):
    rng = np.random.default_rng(seed)
    x, g, s = _param(rng, 4, 5), _param(rng, 5), _param(rng, 5)
    w = rng.normal(size=(4, 5))
    T.sum(T.layer_norm(x, g, s, eps=1e-8) * w).backward()
    tx, tg, ts = _torch(x), _torch(g), _torch(s)
    (torch.nn.functional.layer_norm(tx, (5,), tg, ts, eps=1e-8) * torch.tensor(w)).sum().backward()
    for ours, theirs in ((x, tx), (g, tg), (s, ts)):
        np.testing.assert_allclose(ours.grad, theirs.grad.numpy(), rtol=1e-7, atol=1e-10)


@needs_torch
def test_gelu_matches_torch_tanh_approximation():
    v = np.linspace(-6, 6, 101)
    x = T.DiffArray(v, requires_grad=True)
    T.sum(T.gelu(x)).backward()
    tx = _torch(v)
    y = torch.nn.functional.gelu(tx, approximate="tanh")
    y.sum().backward()
    np.testing.assert_allclose(T.gelu(v).values, y.detach().numpy(), atol=1e-12)
    np.testing.assert_allclose(x.grad, tx.grad.numpy(), atol=1e-12)


# ----------------------------------------------------------------- attention

def test_attention_hand_computed():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    k = np.array([[1.0, 0.0], [0.0, 1.0]])
    v = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = T.causal_attention(q, k, v).values
    # row 0 sees only itself; row 1 weights [e^0, e^(1/sqrt2)] normalised
    w = np.exp([0.0, 1 / math.sqrt(2)])
    w /= w.sum()
    np.testing.assert_allclose(out[0], v[0])
    np.testing.assert_allclose(out[1], w @ v)


def test_attention_fully_masked_row_is_error():
    mask = np.array([[True, False], [False, False]])
    with pytest.raises(ValueError):
        T.attention(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)), mask)


def test_causal_attention_ignores_future():
    rng = np.random.default_rng(0)
    q, k, v = (rng.normal(size=(5, 4)) for _ in range(3))
    base = T.causal_attention(q, k, v).values
    k2, v2 = k.copy(), v.copy()
    k2[3:] += 10.0
    v2[3:] -= 5.0
    np.testing.assert_allclose(T.causal_attention(q, k2, v2).values[:3], base[:3])


@needs_torch
@pytest.mark.parametrize("seed", range(5))
def test_attention_matches_torch(seed):
    rng = np.random.default_rng(seed)
    q, k, v = _param(rng, 2, 3, 5, 4), _param(rng, 2, 3, 5, 4), _param(rng, 2, 3, 5, 4)
    mask = rng.random((2, 1, 5, 5)) < 0.6
    mask |= np.eye(5, dtype=bool)
    w = rng.normal(size=(2, 3, 5, 4))
    T.sum(T.attention(q, k, v, mask) * w).backward()
    tq, tk, tv = _torch(q), _torch(k), _torch(v)
    out = torch.nn.functional.scaled_dot_product_attention(tq, tk, tv, attn_mask=torch.tensor(mask))
    (out * torch.tensor(w)).sum().backward()
    for ours, theirs in ((q, tq), (k, tk), (v, tv)):
        np.testing.assert_allclose(ours.grad, theirs.grad.numpy(), rtol=1e-7, atol=1e-10)


# ----------------------------------------------------------------- GRU

def _gru_oracle(x, h, W, U, b):
    H = h.shape[-1]
    sig = lambda a: 1 / (1 + np.exp(-a))
    z = sig(x @ W[:, :H] + h @ U[:, :H] + b[:H])
    r = sig(x @ W[:, H:2 * H] + h @ U[:, H:2 * H] + b[H:2 * H])
    c = np.tanh(x @ W[:, 2 * H:] + (r * h) @ U[:, 2 * H:] + b[2 * H:])
    return (1 - z) * h + z * c


def test_gru_step_matches_written_out_equations():
    rng = np.random.default_rng(0)
    x, h = rng.normal(size=(3, 4)), rng.normal(size=(3, 5))
    W, U, b = rng.normal(size=(4, 15)), rng.normal(size=(5, 15)), rng.normal(size=15)
    out = T.gru_step(x, h, {"W": W, "U": U, "b": b}).values
    np.testing.assert_allclose(out, _gru_oracle(x, h, W, U, b), atol=1e-12)


def test_gru_zero_parameters_halve_the_state():
    # all gates at sigmoid(0) = 0.5 and candidate tanh(0) = 0
    H = 3
    h = np.array([[1.0, -2.0, 4.0]])
    out = T.gru_step(np.zeros((1, 2)), h, {"W": np.zeros((2, 3 * H)), "U": np.zeros((H, 3 * H)), "b": np.zeros(3 * H)})
    np.testing.assert_allclose(out.values, h / 2)


def test_gru_step_shape_error():
    with pytest.raises(ValueError):
        T.gru_step(np.zeros((1, 2)), np.zeros((1, 3)), {"W": np.zeros((2, 8)), "U": np.zeros((3, 9)), "b": np.zeros(9)})


@needs_torch
@pytest.mark.parametrize("seed", range(5))
def test_gru_sequence_matches_unrolled_steps_and_torch_grads(seed):
    rng = np.random.default_rng(seed)
    x = _param(rng, 2, 4, 3)
    W, U, b = _param(rng, 3, 12, scale=0.5), _param(rng, 4, 12, scale=0.5), _param(rng, 12, scale=0.5)
    mask = np.array([[0, 1, 1, 1], [1, 1, 0, 1]], dtype=bool)
    seq = T.gru_sequence(x, W, U, b, step_mask=mask)
    h = np.zeros((2, 4))
    for t in range(4):
        new = _gru_oracle(x.values[:, t], h, W.values, U.values, b.values)
        h = np.where(mask[:, t, None], new, h)
        np.testing.assert_allclose(seq.values[:, t], h, atol=1e-12)

    w = rng.normal(size=seq.shape)
    T.sum(seq * w).backward()
    tx, tW, tU, tb = (_torch(p) for p in (x, W, U, b))
    th, outs = torch.zeros(2, 4, dtype=torch.float64), []
    for t in range(4):
        z = torch.sigmoid(tx[:, t] @ tW[:, :4] + th @ tU[:, :4] + tb[:4])
        r = torch.sigmoid(tx[:, t] @ tW[:, 4:8] + th @ tU[:, 4:8] + tb[4:8])
        c = torch.tanh(tx[:, t] @ tW[:, 8:] + (r * th) @ tU[:, 8:] + tb[8:])
        m = torch.tensor(mask[:, t, None], dtype=torch.float64)
        th = m * ((1 - z) * th + z * c) + (1 - m) * th
        outs.append(th)
    (torch.stack(outs, 1) * torch.tensor(w)).sum().backward()
    for ours, theirs in ((x, tx), (W, tW), (U, tU), (b, tb)):
        np.testing.assert_allclose(ours.grad, theirs.grad.numpy(), rtol=1e-7, atol=1e-10)


def test_gru_step_gradcheck():
    rng = np.random.default_rng(0)
    x, h = _param(rng, 2, 3), _param(rng, 2, 4)
    p = {"W": _param(rng, 3, 12), "U": _param(rng, 4, 12), "b": _param(rng, 12)}
    assert finite_diff_check(lambda: T.sum(_sq(T.gru_step(x, h, p))), [x, h, *p.values()]) < 1e-6


# ----------------------------------------------------------------- optimiser

def test_adam_first_step_is_lr_times_sign():
    g = np.array([0.3, -2.0, 1e-3])
    p = T.DiffArray(np.zeros(3), requires_grad=True)
    p.grad = g.copy()
    state = AdamState.for_param(p)
    adam_update(p, state, lr=0.01)
    np.testing.assert_allclose(p.values, -0.01 * np.sign(g), rtol=1e-4)
    assert state.step_count == 1


@needs_torch
def test_adam_matches_torch_over_several_steps():
    rng = np.random.default_rng(0)
    p = T.DiffArray(rng.normal(size=5), requires_grad=True)
    tp = torch.tensor(p.values.copy(), requires_grad=True)
    opt, topt = Adam({"p": p}, lr=0.05), torch.optim.Adam([tp], lr=0.05, betas=(0.9, 0.999), eps=1e-8)
    for _ in range(10):
        opt.zero_grad()
        T.sum(p * p * p).backward()
        opt.step()
        topt.zero_grad()
        (tp ** 3).sum().backward()
        topt.step()
    np.testing.assert_allclose(p.values, tp.detach().numpy(), rtol=1e-10)
    assert opt.step_count == 10


def test_adam_update_without_grad_is_error():
    p = T.DiffArray(np.zeros(2), requires_grad=True)
    with pytest.raises(ValueError):
        adam_update(p, AdamState.for_param(p), 0.1)


def test_gradcheck_rejects_non_finite():
    x = T.DiffArray(np.array([-1.0]), requires_grad=True)
    with pytest.raises(ValueError):
        finite_diff_check(lambda: T.sum(T.log(x)), [x])
