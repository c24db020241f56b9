"""Pure-Python fallback for the compiled kernels in ``_kernels.pyx``."""

import math

import numpy as np


def jacobi_sweeps(at, vt, tol, max_sweeps):
    n = at.shape[0]
    sweep = 0
    rotated = True
    while rotated and sweep < max_sweeps:
        rotated = False
        sweep += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap = at[p]
                aq = at[q]
                alpha = float(ap @ ap)
                beta = float(aq @ aq)
                gamma = float(ap @ aq)
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + math.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                at[p], at[q] = c * ap - s * aq, s * ap + c * aq
                vp = vt[p]
                vq = vt[q]
                vt[p], vt[q] = c * vp - s * vq, s * vp + c * vq
    return sweep


def patch_coverage(mask, patch):
    h, w = mask.shape
    blocks = mask.reshape(h // patch, patch, w // patch, patch).astype(np.int64)
    return blocks.sum(axis=(1, 3)).reshape(-1) / float(patch * patch)
