import pytest

from fmkr.stages import ATTACK_STAGES, N_STAGES, StageLabel


@pytest.mark.parametrize("token,expected", [
    ("NT", StageLabel.NT), (" de ", StageLabel.DE), ("Lm", StageLabel.LM), (2, StageLabel.EF),
    ("3", StageLabel.LM), (StageLabel.RN, StageLabel.RN),
])
def test_parse(token, expected):
    assert StageLabel.parse(token) is expected


@pytest.mark.parametrize("token", ["XX", "", 5, -1, "7", 1.5, None])
def test_parse_rejects(token):
    with pytest.raises(ValueError):
        StageLabel.parse(token)


def test_order_is_severity():
    assert N_STAGES == 5
    assert max(StageLabel.RN, StageLabel.LM) is StageLabel.LM
    assert StageLabel.NT not in ATTACK_STAGES and len(ATTACK_STAGES) == 4
