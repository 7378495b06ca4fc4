"""Tolerant line-oriented parsing of model replies into typed records."""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass

from .records import ActionProposal, InvalidLabel, NoViableAction, ParseError, PerceptionVerdict, ProposalKind


class Grammar(enum.Enum):
    VERDICT = "Verdict"
    GRASP = "Grasp"
    LIFT = "Lift"
    PUSH = "Push"
    CAMERA = "Camera"
    CHOICE = "Choice"


_FENCE = re.compile(r"^\s*(```|~~~)")
_BULLET = re.compile(r"^\s*(?:[-*+•>]+|\d+[.)])\s+")
_EMPH = re.compile(r"(\*\*|__|`+)")
_HEADING = re.compile(r"^\s*#+\s*")
_LATEX = re.compile(r"\\[a-zA-Z]+(?:\{[^{}]*\})?")


def clean_lines(text) -> list[str]:
    """Drop code fences, bullets, headings and emphasis markers."""
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    if not isinstance(text, str):
        text = str(text)
    out = []
    for raw in text.replace("\r\n", "\n").replace("\r", "\n").split("\n"):
        if _FENCE.match(raw):
            continue
        line = _HEADING.sub("", _LATEX.sub("", raw))
        line = _BULLET.sub("", line)
        line = _EMPH.sub("", line).strip()
        line = _BULLET.sub("", line).strip()
        if line:
            out.append(line)
    return out


def extract_fields(text, keys: list[str], inline: bool = False) -> dict[str, str]:
    """Map each key (lower-cased) to its first value.

    A key counts at the start of a line; with ``inline`` it also counts
    after ``,`` or ``;``. Longer keys are tried first so that
    "analysis of action" is not read as "action".
    """
    ordered = sorted(keys, key=len, reverse=True)
    alt = "|".join(r"\s+".join(re.escape(w) for w in k.split()) for k in ordered)
    lead = r"(?:^|(?<=[,;]))" if inline else r"^"
    pat = re.compile(lead + r"\s*(" + alt + r")\s*[:=]", re.IGNORECASE)
    found: dict[str, str] = {}
    for line in clean_lines(text):
        ms = list(pat.finditer(line))
        for i, m in enumerate(ms):
            key = " ".join(m.group(1).lower().split())
            end = ms[i + 1].start() if i + 1 < len(ms) else len(line)
            val = line[m.end() : end].strip().rstrip(",;").strip()
            found.setdefault(key, val)
    return found


def _list_items(val: str) -> tuple[str, ...]:
    val = val.strip().strip("[]")
    items = [v.strip().strip("'\"").strip() for v in re.split(r"[,;]", val)]
    return tuple(v for v in items if v)


def _nullable(val: str | None) -> str | None:
    if val is None:
        return None
    v = val.strip().strip("[]").strip()
    return v or None


_VERDICT_KEYS = ["answer", "output", "objects", "thought", "target object", "analysis of action", "action"]


def parse_verdict(text) -> PerceptionVerdict:
    f = extract_fields(text, _VERDICT_KEYS)
    if "output" not in f:
        raise ParseError(["Output"])
    out = re.sub(r"[^a-z]", "", f["output"].lower())
    if out.startswith("stop"):
        ans = _nullable(f.get("answer"))
        if ans is None:
            raise ParseError(["Answer"], "Output:stop needs an answer")
        return PerceptionVerdict(
            True,
            answer=ans,
            objects=_list_items(f.get("objects", "")),
            thought=f.get("thought", ""),
            target_object=_nullable(f.get("target object")),
            action_analysis=f.get("analysis of action", ""),
        )
    if out.startswith("go"):
        act = _nullable(f.get("action"))
        if act is None:
            raise ParseError(["Action"], "Output:go needs an action")
        return PerceptionVerdict(
            False,
            objects=_list_items(f.get("objects", "")),
            thought=f.get("thought", ""),
            target_object=_nullable(f.get("target object")),
            action_analysis=f.get("analysis of action", ""),
            suggested_action=act,
        )
    raise ParseError(["Output"], f"unrecognised output value {f['output']!r}")


_NUM = r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)"
_CELL = re.compile(r"[\[(]?\s*(" + _NUM + r")\s*[;,]\s*(" + _NUM + r")\s*[\])]?")
_KEYPOINT = re.compile(r"\bP\s*(\d{1,6})\b", re.IGNORECASE)


def _one_decimal(v: float) -> float:
    return round(v + 0.0, 1) + 0.0


def _grid_cell(val: str, lo: float = 0.0, hi: float = 5.0) -> tuple[float, float]:
    m = _CELL.search(val)
    if not m:
        raise ParseError(["Place"], f"no [x; y] cell in {val!r}")
    x, y = float(m.group(1)), float(m.group(2))
    if not (math.isfinite(x) and math.isfinite(y)):
        raise InvalidLabel(f"non-finite grid cell {val!r}")
    x, y = _one_decimal(x), _one_decimal(y)
    if not (lo <= x <= hi and lo <= y <= hi):
        raise InvalidLabel(f"grid cell [{x}; {y}] outside [{lo}, {hi}]")
    return (x, y)


def _keypoint(val: str, offered) -> str:
    m = _KEYPOINT.search(val)
    if not m:
        raise ParseError(["Contact"], f"no keypoint label in {val!r}")
    label = f"P{int(m.group(1))}"
    if label not in offered:
        raise InvalidLabel(f"keypoint {label} was not offered")
    return label


_GRASP_KEYS = ["contact", "contact keypoint", "contact location", "contact point", "place", "place location", "place cell"]
KEYPOINT_LABELS = ("P1", "P2", "P3", "P4", "P5")


def parse_grasp(text, offered=KEYPOINT_LABELS, require_place: bool = True) -> ActionProposal:
    f = extract_fields(text, _GRASP_KEYS, inline=True)
    contact = f.get("contact") or f.get("contact keypoint") or f.get("contact location") or f.get("contact point")
    place = f.get("place") or f.get("place location") or f.get("place cell")
    lines = clean_lines(text)
    if contact is None:
        # a bare keypoint label on its own is accepted too
        bare = [ln for ln in lines if _KEYPOINT.fullmatch(ln.strip(" .").replace(" ", ""))]
        if not bare:
            missing = ["Contact"] + (["Place"] if require_place and place is None else [])
            raise ParseError(missing)
        contact = bare[0]
    label = _keypoint(contact, offered)
    if not require_place:
        return ActionProposal(ProposalKind.LIFT, contact_keypoint=label, rationale=" ".join(lines))
    if place is None:
        raise ParseError(["Place"])
    return ActionProposal(ProposalKind.GRASP_PLACE, contact_keypoint=label, place_cell=_grid_cell(place), rationale=" ".join(lines))


_ARROW = re.compile(r"\bP\s*(\d{1,6})\s*(?:→|->|=>|-+>|⟶|to)\s*D\s*(\d{1,6})\b", re.IGNORECASE)
_LINE = re.compile(r"\b(?:push\s*line|line|stroke)\s*#?\s*(\d{1,6})\b", re.IGNORECASE)
_NONE = re.compile(r"\bnone\b", re.IGNORECASE)


def parse_push(text, offered=(1, 2, 3, 4, 5, 6)) -> ActionProposal:
    lines = clean_lines(text)
    joined = " ".join(lines)
    k = None
    m = _ARROW.search(joined)
    if m:
        a, b = int(m.group(1)), int(m.group(2))
        if a != b:
            raise InvalidLabel(f"P{a} and D{b} belong to different strokes")
        k = a
    else:
        m = _LINE.search(joined)
        if m:
            k = int(m.group(1))
        elif _NONE.search(joined):
            raise NoViableAction("the model reported no viable push")
        else:
            m = _KEYPOINT.search(joined)
            if m:
                k = int(m.group(1))
    if k is None:
        raise ParseError(["Push"], "no stroke label such as P3→D3")
    if k not in tuple(offered):
        raise InvalidLabel(f"stroke {k} was not offered (offered {list(offered)})")
    return ActionProposal(ProposalKind.PUSH, push_line=k, rationale=joined)


_TUPLE = re.compile(r"\(\s*(" + _NUM + r")\s*,\s*(" + _NUM + r")\s*,\s*(" + _NUM + r")\s*,\s*(" + _NUM + r")\s*\)")
_CAMERA_KEYS = ["vertex_x", "vertex_y", "vertex_z", "orient_x", "vertex x", "vertex y", "vertex z", "orient x"]


def _discrete(v: float, name: str) -> int:
    if v != int(v) or int(v) not in (0, 1, 2):
        raise InvalidLabel(f"{name} must be 0, 1 or 2, got {v}")
    return int(v)


def parse_camera(text) -> ActionProposal:
    lines = clean_lines(text)
    joined = " ".join(lines)
    m = _TUPLE.search(joined)
    if m:
        vals = [float(g) for g in m.groups()]
    else:
        f = extract_fields(text, _CAMERA_KEYS, inline=True)
        f = {k.replace(" ", "_"): v for k, v in f.items()}
        need = ["vertex_x", "vertex_y", "vertex_z", "orient_x"]
        missing = [k for k in need if k not in f]
        if missing:
            raise ParseError(missing)
        vals = []
        for k in need:
            nm = re.search(_NUM, f[k])
            if not nm:
                raise ParseError([k], f"no number in {f[k]!r}")
            vals.append(float(nm.group(0)))
    x, y, z, o = vals
    if not all(math.isfinite(v) for v in vals):
        raise InvalidLabel("non-finite camera vertex")
    x, y = _one_decimal(x), _one_decimal(y)
    if not (0.0 <= x <= 5.0 and 0.0 <= y <= 5.0):
        raise InvalidLabel(f"camera vertex ({x}, {y}) outside [0, 5]")
    return ActionProposal(
        ProposalKind.CAMERA_MOVE,
        cube_vertex=(x, y, _discrete(z, "vertex_z"), _discrete(o, "orient_x")),
        rationale=joined,
    )


@dataclass(frozen=True)
class Choice:
    index: int
    target_object: str | None


def parse_choice(text) -> Choice:
    f = extract_fields(text, ["choice", "target object"])
    if "choice" not in f:
        raise ParseError(["Choice"])
    m = re.search(r"[-+]?\d{1,6}", f["choice"])
    if not m:
        raise ParseError(["Choice"], f"no index in {f['choice']!r}")
    return Choice(int(m.group(0)), _nullable(f.get("target object")))


def parse_structured_output(text, grammar: Grammar, **kw):
    """Dispatch to the parser for ``grammar``; returns the typed record."""
    if grammar is Grammar.VERDICT:
        return parse_verdict(text)
    if grammar is Grammar.GRASP:
        return parse_grasp(text, **kw)
    if grammar is Grammar.LIFT:
        return parse_grasp(text, require_place=False, **kw)
    if grammar is Grammar.PUSH:
        return parse_push(text, **kw)
    if grammar is Grammar.CAMERA:
        return parse_camera(text)
    if grammar is Grammar.CHOICE:
        return parse_choice(text)
    raise ValueError(f"unknown grammar {grammar!r}")


# -- formatting (inverse of the parsers, used for fixtures and round trips) --------


def format_verdict(v: PerceptionVerdict) -> str:
    if v.resolved:
        return f"Answer: {v.answer}\nOutput:stop"
    lines = [
        f"Objects: {', '.join(v.objects)}",
        f"Thought: {v.thought}",
        f"Target Object: {v.target_object or ''}",
        f"Analysis of action: {v.action_analysis}",
        f"Action: {v.suggested_action}",
        "Output:go",
    ]
    return "\n".join(lines)


def format_proposal(p: ActionProposal) -> str:
    if p.kind is ProposalKind.GRASP_PLACE:
        x, y = p.place_cell
        return f"Contact: {p.contact_keypoint}, Place: [{x:.1f}; {y:.1f}]"
    if p.kind is ProposalKind.LIFT:
        return f"Contact: {p.contact_keypoint}"
    if p.kind is ProposalKind.PUSH:
        return f"P{p.push_line}→D{p.push_line}"
    x, y, z, o = p.cube_vertex
    return f"({x:.1f}, {y:.1f}, {z}, {o})"
