import numpy as np


def group_pairs(groups):
    """All ordered index pairs ``(i, j)`` with ``groups[i] == groups[j]``.

    ``groups`` must be sorted.  Pair order is deterministic: by first index,
    then second.
    """
    groups = np.asarray(groups)
    n = len(groups)
    if n == 0:
        return np.zeros(0, int), np.zeros(0, int)
    starts = np.flatnonzero(np.r_[True, groups[1:] != groups[:-1]])
    counts = np.diff(np.r_[starts, n])
    size = np.repeat(counts, counts)  # group size of each element
    first = np.repeat(np.arange(n), size)
    start_of = np.repeat(np.repeat(starts, counts), size)
    offsets = np.arange(len(first)) - np.repeat(np.cumsum(size) - size, size)
    return first, start_of + offsets


def unordered_group_pairs(groups):
    i, j = group_pairs(groups)
    keep = i < j
    return i[keep], j[keep]
