import numpy as np

from dscache.model import TokenBlock
from dscache.policies import StreamEvent
from dscache.tensorcore import Rng, seeded_gaussian


def frames(model, n, tpf=8, seed=1, start=0):
    rng = Rng(seed)
    return [TokenBlock.visual(seeded_gaussian(rng.split("frame", i), tpf, model.hidden, 1.0, model.dtype), i, i)
            for i in range(start, start + n)]


def query(model, i, tokens=4, seed=1):
    ids = Rng(seed).split("query", i).generator().integers(0, model.spec.vocab_size, tokens)
    return TokenBlock.text(model.embed_tokens(ids), 10**6 + i)


def stream(model, n_frames, query_steps, tpf=8, max_new=4, seed=1, q_tokens=4):
    """Frame events with a query after each step in ``query_steps``."""
    steps = set(query_steps)
    events = []
    for f in frames(model, n_frames, tpf, seed):
        events.append(StreamEvent.frame(f, f.block_id))
        if f.block_id in steps:
            events.append(StreamEvent.query(query(model, f.block_id, q_tokens, seed), max_new, f.block_id))
    return events


def max_abs(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    assert a.shape == b.shape, (a.shape, b.shape)
    return float(np.max(np.abs(a - b))) if a.size else 0.0
