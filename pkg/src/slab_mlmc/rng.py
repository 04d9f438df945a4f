"""Counter-based normal streams keyed by (seed, stream, level, sample index).

Each sample owns a Philox stream whose key encodes (seed, stream, level) and
whose counter starts at the sample index, so draws do not depend on the order
in which samples are evaluated or on how they are spread over workers. The
i-th normal of a stream depends only on i, which makes prefixes stable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1

STREAMS = {"mlmc": 1, "mc": 2, "reference": 3, "convergence": 4, "pilot": 5, "solve": 6, "check": 7}


@dataclass(frozen=True)
class SampleStream:
    seed: int
    stream: int
    level: int
    index: int

    def _bitgen(self):
        key = np.array([self.seed & _MASK64, ((self.stream & 0xFFFFFFFF) << 32) | (self.level & 0xFFFFFFFF)],
                       dtype=np.uint64)
        counter = np.array([0, self.index & _MASK64, 0, 0], dtype=np.uint64)
        return np.random.Philox(key=key, counter=counter)

    def uniforms(self, count):
        """Uniforms on the open interval (0, 1)."""
        return _to_uniform(self._bitgen().random_raw(int(count)))

    def normals(self, count):
        return ndtri(self.uniforms(count))


def _to_uniform(raw):
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def normals_block(seed, stream, level, indices, count):
    """Row r equals SampleStream(seed, stream, level, indices[r]).normals(count)."""
    indices = list(indices)
    raw = np.empty((len(indices), int(count)), dtype=np.uint64)
    if indices and count:
        # one generator, re-positioned per sample: much cheaper than constructing one each time
        bitgen = SampleStream(seed, stream, level, indices[0])._bitgen()
        state = bitgen.state
        for r, idx in enumerate(indices):
            state["state"]["counter"][:] = (0, idx & _MASK64, 0, 0)
            state["buffer_pos"] = 4
            bitgen.state = state
            raw[r] = bitgen.random_raw(int(count))
    return ndtri(_to_uniform(raw))


def stream_id(name):
    return STREAMS[name] if isinstance(name, str) else int(name)
