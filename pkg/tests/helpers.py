import itertools

import numpy as np

from crofdma.allocator import zeta
from crofdma.model import ChannelRealization, SystemConfig


def realization_from_gains(cfg: SystemConfig, gain, cross) -> ChannelRealization:
    """Realization whose allocator gain (M = 1 + gain * P) equals ``gain``."""
    gain = np.asarray(gain, dtype=float)
    cross = np.asarray(cross, dtype=complex)
    direct = gain * cfg.total_noise / zeta(cfg.ber_target)
    return ChannelRealization(direct, cross, cross.copy(), np.zeros_like(cross),
                              cfg.nominal_power * direct / cfg.total_noise, None)


def brute_force_ase(gain, w, p_total, i_th, step=1e-3):
    """Exhaustive search over assignments and a power grid for two subcarriers."""
    gain = np.asarray(gain, dtype=float)
    n, k = gain.shape
    assert k == 2
    p1 = np.arange(0.0, p_total + step / 2, step)
    best = 0.0
    for users in itertools.product(range(n), repeat=k):
        g1, g2 = gain[users[0], 0], gain[users[1], 1]
        cap2 = np.minimum(p_total - p1, (i_th - w[0] * p1) / w[1])
        ok = cap2 >= 0
        p2 = np.floor(cap2[ok] / step + 1e-9) * step
        val = np.log2(1 + g1 * p1[ok]) + np.log2(1 + g2 * p2)
        if val.size:
            best = max(best, float(val.max()))
    return best
