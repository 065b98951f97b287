import numpy as np
import pytest

from seqrec.data import Interaction, build_dataset, split_leave_one_out, synthetic_log


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_split():
    """Synthetic log with enough structure for training to beat chance."""
    return split_leave_one_out(build_dataset(synthetic_log(80, 30, seed=3, min_len=6, max_len=20)))


def make_dataset(sequences, min_per_user=1):
    rows = []
    for u, seq in enumerate(sequences):
        rows += [Interaction(f"u{u}", str(item), t) for t, item in enumerate(seq)]
    return build_dataset(rows, min_per_user=min_per_user)


def tiny_split(seed, num_items=20, num_users=6, length=9):
    """Leave-one-out split over a random log that uses every item id at least once."""
    rng = np.random.default_rng(seed)
    seqs = [rng.integers(1, num_items + 1, size=length).tolist() for _ in range(num_users)]
    seqs[0] = list(range(1, num_items + 1))
    return split_leave_one_out(make_dataset(seqs, min_per_user=5))


def model_gradient_error(kind, loss_kind, seed, d=8, L=6, V=20):
    """Max relative finite-difference error of a full training-batch loss."""
    from seqrec.data import causal_batches, masked_batches
    from seqrec.gradcheck import finite_diff_check
    from seqrec.losses import LossSpec
    from seqrec.models import ModelConfig, build_model
    from seqrec.trainer import batch_loss

    split = tiny_split(seed, num_items=V)
    cfg = ModelConfig(kind, num_items=V, hidden_size=d, num_blocks=2, num_heads=2 if kind == "bert4rec" else 1,
                      max_len=L, dropout_prob=0.1)
    model = build_model(cfg, seed=seed)
    # Redraw at a scale where every gradient sits far above the central-difference
    # rounding floor (~1e-11 here); the 0.02-std init leaves many near 1e-10.
    init = np.random.default_rng(seed + 50)
    for p in model.params.values():
        p.values = init.normal(scale=0.5, size=p.shape)
    if kind == "bert4rec":
        batch = next(iter(masked_batches(split, L, 0.3, seed, 16)))
    else:
        batch = next(iter(causal_batches(split, L, 16, seed)))
    loss_spec = LossSpec(loss_kind, 5 if loss_kind == "sampled_ce" else None)
    f = lambda: batch_loss(model, batch, loss_spec, split, np.random.default_rng(seed + 100))
    return finite_diff_check(f, model.params, coords_per_param=6, seed=seed)


# ----------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
