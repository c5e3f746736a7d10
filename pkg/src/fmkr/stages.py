"""Kill-chain stage labels shared by every module."""

from __future__ import annotations

import enum
import operator


class StageLabel(enum.IntEnum):
    """APT kill-chain stage.

    Integer codes double as severity order, so ``max`` of two labels is the
    later stage in the chain.
    """

    NT = 0  # normal traffic
    RN = 1  # reconnaissance
    EF = 2  # establish foothold
    LM = 3  # lateral movement
    DE = 4  # data exfiltration

    @classmethod
    def parse(cls, token: str | int | StageLabel) -> StageLabel:
        """Parse a stage name (case-insensitive) or integer code (int or digit string)."""
        if isinstance(token, StageLabel):
            return token
        if not isinstance(token, str):
            try:
                return cls(operator.index(token))
            except (TypeError, ValueError):
                raise ValueError(f"unknown stage code: {token!r}") from None
        name = token.strip().upper()
        if name.isdigit():
            return cls.parse(int(name))
        try:
            return cls[name]
        except KeyError:
            raise ValueError(f"unknown stage label: {token!r}") from None


N_STAGES = len(StageLabel)
ATTACK_STAGES = frozenset(s for s in StageLabel if s is not StageLabel.NT)
