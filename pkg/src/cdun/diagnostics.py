"""Process-wide counters for numerical guards.

Guards never raise; they clamp and count. The CLI inspects these counters to
decide on exit code 3.
"""
from collections import Counter

counters = Counter()


def bump(name, n=1):
    if n:
        counters[name] += int(n)


def reset():
    counters.clear()


def tripped():
    return sum(counters.values()) > 0
