"""Independent reference implementations the package is checked against.

Nothing here imports the kernels under test: matmul is a Python triple loop,
RoPE uses complex multiplication, and the transformer forward is a one-shot
full-sequence pass with a dense causal mask.
"""

import math

import numpy as np


def matmul_loop(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i][t]) * float(b[t][j])
            out[i, j] = s
    return out


def softmax_direct(row):
    e = [math.exp(x) for x in row]
    total = sum(e)
    return [x / total for x in e]


def rms_loop(row, gain, eps=1e-6):
    ms = sum(float(x) * float(x) for x in row) / len(row)
    d = math.sqrt(ms + eps)
    return [float(x) / d * float(g) for x, g in zip(row, gain)]


def rope_complex(x, position, head_dim, base=10000.0):
    """Rotate adjacent pairs by treating (x[2i], x[2i+1]) as one complex number."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for h in range(0, len(x), head_dim):
        for i in range(head_dim // 2):
            theta = position * base ** (-2.0 * i / head_dim)
            z = complex(x[h + 2 * i], x[h + 2 * i + 1]) * complex(math.cos(theta), math.sin(theta))
            out[h + 2 * i], out[h + 2 * i + 1] = z.real, z.imag
    return out


def _rope_rows(m, positions, head_dim, base):
    return np.stack([rope_complex(r, p, head_dim, base) for r, p in zip(m, positions)])


def forward_full(model, x, positions=None):
    """One-shot causal forward over the whole sequence ``x`` (tokens x hidden).

    Returns the final residual stream and per-layer raw (unrotated) keys and values.
    """
    spec = model.spec
    n = x.shape[0]
    positions = np.arange(n) if positions is None else np.asarray(positions)
    hd, H = spec.head_dim, spec.num_heads
    z = np.array(x, dtype=np.float64)
    keys, values = [], []

    def norm(v, g):
        return v / np.sqrt(np.mean(v * v, axis=1, keepdims=True) + 1e-6) * g

    for w in model.layers:
        h = norm(z, w.norm_attn)
        q, k, v = h @ w.wq, h @ w.wk, h @ w.wv
        keys.append(k)
        values.append(v)
        qr = _rope_rows(q, positions, hd, spec.rope_base)
        kr = _rope_rows(k, positions, hd, spec.rope_base)
        heads = []
        for j in range(H):
            c = slice(j * hd, (j + 1) * hd)
            s = qr[:, c] @ kr[:, c].T / math.sqrt(hd)
            s = np.where(np.tril(np.ones((n, n), bool)), s, -np.inf)
            a = np.exp(s - s.max(axis=1, keepdims=True))
            a /= a.sum(axis=1, keepdims=True)
            heads.append(a @ v[:, c])
        z = z + np.concatenate(heads, axis=1) @ w.wo
        u = norm(z, w.norm_ffn) @ w.w_up
        z = z + (u / (1 + np.exp(-u))) @ w.w_down
    return z, keys, values


def greedy_full(model, x, max_new):
    """Greedy decoding by re-running the one-shot forward on the growing sequence."""
    tokens = []
    seq = np.array(x, dtype=np.float64)
    for _ in range(max_new):
        z, _, _ = forward_full(model, seq)
        last = z[-1:]
        h = last / np.sqrt(np.mean(last * last) + 1e-6) * model.final_norm
        tok = int(np.argmax(h @ model.lm_head))
        tokens.append(tok)
        seq = np.concatenate([seq, model.embedding[[tok]]])
    return tokens
