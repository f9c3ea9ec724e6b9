"""Named random substreams.

A single experiment seed fans out into independent generators, one per
purpose, so that e.g. adding a dropout draw cannot shift the data split.
Streams are derived with ``SeedSequence([seed, stream_id])``; the mapping
from name to id is fixed and append-only.
"""

import numpy as np

STREAM_IDS = {
    "data": 0,
    "init": 1,
    "mask": 2,
    "shuffle": 3,
    "dropout": 4,
    "probe": 5,
}


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return the generator for stream `name` under `seed`.

    Optional `extra` integers derive further independent shards within a
    stream (e.g. one per corpus split) without touching the others.
    """
    try:
        sid = STREAM_IDS[name]
    except KeyError:
        raise KeyError(f"unknown rng stream {name!r}; known: {sorted(STREAM_IDS)}") from None
    entropy = [seed, sid, *[int(x) for x in extra]]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
