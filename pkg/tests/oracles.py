"""Independent reference computations shared by unit and acceptance tests."""

import numpy as np

from tagpr.policy import PolicyParams, Vocab, sft_loss_and_grad
from tagpr.prmu import PairBatch, PrmuModel, bt_grad, bt_loss

STEP = 1e-5


def central_diff(f, x, step=STEP):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = step
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def rel_err(a, b):
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def random_prmu_case(rng, dim=12, n_users=3, batch=6):
    users = [f"u{i}" for i in range(n_users)]
    model = PrmuModel(dim, rng.normal(size=dim), float(rng.normal()),
                      {u: rng.normal(size=dim) for u in users})
    pos = rng.normal(size=(batch, dim))
    neg = rng.normal(size=(batch, dim))
    pos /= np.linalg.norm(pos, axis=1, keepdims=True)
    neg /= np.linalg.norm(neg, axis=1, keepdims=True)
    ids = [users[int(i)] for i in rng.integers(n_users, size=batch)]
    return model, PairBatch(pos, neg, ids)


def prmu_fd_error(model, batch):
    """Relative error between bt_grad and central differences over w, b and every user row."""
    users = sorted(model.users)
    dim = model.dim

    def unpack(x):
        m = model.copy()
        m.w = x[:dim].copy()
        m.b = float(x[dim])
        for k, u in enumerate(users):
            m.users[u] = x[dim + 1 + k * dim: dim + 1 + (k + 1) * dim].copy()
        return m

    x0 = np.concatenate([model.w, [model.b]] + [model.users[u] for u in users])
    g = bt_grad(model, batch)
    analytic = np.concatenate([g.w, [g.b]] + [g.users.get(u, np.zeros(dim)) for u in users])
    numeric = central_diff(lambda x: bt_loss(unpack(x), batch), x0)
    return rel_err(analytic, numeric)


def random_policy_case(rng, n_symbols=6, prompt_dim=4, batch=3, max_len=5):
    vocab = Vocab(tuple(f"s{i}" for i in range(n_symbols - 1)) + ("<end>",))
    params = PolicyParams(vocab, prompt_dim, 2)
    params = params.with_theta(rng.normal(scale=0.5, size=params.theta.shape))
    data = [(rng.normal(size=prompt_dim), list(rng.integers(n_symbols, size=int(rng.integers(1, max_len + 1)))))
            for _ in range(batch)]
    return params, data


def sft_fd_error(params, data):
    _, analytic = sft_loss_and_grad(params, data)
    shape = params.theta.shape
    numeric = central_diff(lambda x: sft_loss_and_grad(params.with_theta(x.reshape(shape)), data)[0],
                           params.theta.ravel().copy())
    return rel_err(analytic.ravel(), numeric)
