"""Independent reference computations the tests compare the package against.

Nothing here imports lft2sim; each value is derived from first principles so
that a bug in the package cannot hide behind an identical bug in its check.
"""

import hashlib
import json
import math


def max_faults(n):
    # largest f with n >= 3f + 1, found by search rather than by formula
    f = 0
    while 3 * (f + 1) + 1 <= n:
        f += 1
    return f


def quorum_size(n):
    return 2 * max_faults(n) + 1


def min_overlap(n, q):
    """Fewest nodes two q-subsets of n nodes can share."""
    return max(0, 2 * q - n)


def block_digest(height, round_, proposer, parent, txs=(), votes=()):
    doc = [height, round_, proposer, parent, [t.hex() for t in txs], [list(v) for v in votes]]
    return hashlib.sha256(json.dumps(doc, separators=(",", ":")).encode()).hexdigest()


def broadcast_deliveries(senders, n):
    # every sender multicasts to everyone but itself
    return senders * (n - 1)


def sweep_count(lo, hi, step):
    count, t = 0, lo
    while t <= hi + 1e-9:
        count += 1
        t = lo + count * step
    return count


def histogram_mean(bins):
    total = math.fsum(p for _, p in bins)
    return math.fsum(d * p for d, p in bins) / total
