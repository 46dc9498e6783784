"""Six-part text sets and deterministic content/style composition."""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, fields

# answer order used by every prompt and answer
ANSWER_ORDER = ("root", "backbone", "left_arm", "right_arm", "left_leg", "right_leg")
PART_LABELS = {
    "root": "Root",
    "backbone": "Backbone",
    "left_arm": "Left Arm",
    "right_arm": "Right Arm",
    "left_leg": "Left Leg",
    "right_leg": "Right Leg",
}


@dataclass(frozen=True)
class PartTexts:
    root: str = ""
    backbone: str = ""
    left_arm: str = ""
    right_arm: str = ""
    left_leg: str = ""
    right_leg: str = ""

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "PartTexts":
        missing = [p for p in ANSWER_ORDER if p not in d]
        if missing:
            raise KeyError(f"part texts missing {missing}")
        return cls(**{p: d[p] for p in ANSWER_ORDER})

    def as_dict(self) -> dict[str, str]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def __getitem__(self, part: str) -> str:
        return getattr(self, part)

    def is_complete(self) -> bool:
        return all(self[p].strip() for p in ANSWER_ORDER)


class Affinity(enum.Enum):
    CONTENT_WINS = "content"
    STYLE_WINS = "style"
    BLEND = "blend"


# upper body carries most style cues; locomotion lives in legs and root
DEFAULT_AFFINITY = {
    "root": Affinity.BLEND,
    "backbone": Affinity.STYLE_WINS,
    "left_arm": Affinity.STYLE_WINS,
    "right_arm": Affinity.STYLE_WINS,
    "left_leg": Affinity.BLEND,
    "right_leg": Affinity.BLEND,
}

# a content clause containing one of these drives the part; style must not overwrite it
ACTION_WORDS = frozenset(
    "throw throws throwing wave waves waving punch punches punching kick kicks kicking "
    "reach reaches reaching grab grabs grabbing point points pointing".split()
)

BLEND_CONNECTIVE = " while "


def is_engaged(text: str) -> bool:
    return any(w in ACTION_WORDS for w in re.findall(r"[a-z]+", text.lower()))


def _blend(content: str, style: str) -> str:
    if not style or style == content:
        return content
    if not content:
        return style
    return content + BLEND_CONNECTIVE + style


def rule_compose(content: PartTexts, style: PartTexts, affinity: dict[str, Affinity]) -> PartTexts:
    missing = [p for p in ANSWER_ORDER if p not in affinity]
    if missing:
        raise KeyError(f"affinity missing {missing}")
    out = {}
    for part in ANSWER_ORDER:
        c, s, rule = content[part], style[part], affinity[part]
        if rule is Affinity.CONTENT_WINS:
            out[part] = c or s
        elif rule is Affinity.STYLE_WINS:
            out[part] = s or c
        else:
            out[part] = _blend(c, s)
    return PartTexts(**out)


def resolve_affinity(content: PartTexts, table: dict[str, Affinity] | None = None) -> dict[str, Affinity]:
    """Start from ``table`` and hand parts the content actively drives back to the content."""
    table = dict(DEFAULT_AFFINITY if table is None else table)
    for part in ANSWER_ORDER:
        if table[part] is Affinity.STYLE_WINS and is_engaged(content[part]):
            table[part] = Affinity.CONTENT_WINS
    return table


def compose_rules(content: PartTexts, style: PartTexts, table: dict[str, Affinity] | None = None) -> PartTexts:
    return rule_compose(content, style, resolve_affinity(content, table))
