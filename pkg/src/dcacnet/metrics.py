"""Word error rate with substitution / insertion / deletion breakdown."""

from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class WerBreakdown:
    substitutions: int
    insertions: int
    deletions: int
    ref_length: int

    @property
    def errors(self):
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self):
        return self.errors / self.ref_length

    def __add__(self, other):
        return WerBreakdown(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_length + other.ref_length,
        )


def wer(ref, hyp):
    """Levenshtein alignment with unit costs.

    Among minimum-cost alignments the one with the most substitutions (i.e.
    fewest insertion+deletion pairs) is reported.
    """
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise ConfigError("reference must be non-empty")
    n, m = len(ref), len(hyp)
    # cell = (total errors, ins + del, subs, ins, dels); compare on the first two
    dp = [[None] * (m + 1) for _ in range(n + 1)]
    dp[0][0] = (0, 0, 0, 0, 0)
    for i in range(1, n + 1):
        dp[i][0] = (i, i, 0, 0, i)
    for j in range(1, m + 1):
        dp[0][j] = (j, j, 0, j, 0)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            e, g, s, ins, dels = dp[i - 1][j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = (e, g, s, ins, dels)
            else:
                diag = (e + 1, g, s + 1, ins, dels)
            e, g, s, ins, dels = dp[i - 1][j]
            up = (e + 1, g + 1, s, ins, dels + 1)
            e, g, s, ins, dels = dp[i][j - 1]
            left = (e + 1, g + 1, s, ins + 1, dels)
            dp[i][j] = min(diag, up, left, key=lambda c: (c[0], c[1]))
    _, _, s, ins, dels = dp[n][m]
    return WerBreakdown(s, ins, dels, n)
