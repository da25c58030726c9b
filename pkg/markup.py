#!/usr/bin/env python3
"""
OpenMic Performance Markup
==========================
Parser, renderer and timeline compiler for the stage-delivery DSL the
PerformanceCoach writes into scripts.

Grammar:
    [pause]            pause of the default length (500 ms)
    [pause:<ms>]       pause, 100..5000 ms
    [applause]         applause cue
    [laughter]         laughter cue
    [emphasis]...[/emphasis]
    [pace:<rate>]...[/pace]      rate multiplier, 0.5..2.0
    [[                 literal "["

Timing model:
    speech duration_ms = round(60000 * speakable_chars / (chars_per_minute * rate))
"""

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

from pydantic import BaseModel, Field, model_validator

from errors import (
    EmptyScript,
    EmptySpan,
    MalformedDuration,
    NestingViolation,
    UnclosedSpan,
    UnknownMarker,
)


DEFAULT_PAUSE_MS = 500
DEFAULT_APPLAUSE_MS = 2000
DEFAULT_LAUGHTER_MS = 1500
PAUSE_RANGE = (100, 5000)
RATE_RANGE = (0.5, 2.0)

# CJK unified ideographs (+ext A, compatibility) and Latin alphanumerics
_SPEAKABLE_RE = re.compile(r"[\u3400-\u4dbf\u4e00-\u9fff\uf900-\ufaff0-9A-Za-z]")
_MARKER_TOKEN_RE = re.compile(r"\[(?:/?(?:emphasis|pace)(?::[^\[\]]*)?|pause(?::[^\[\]]*)?|applause|laughter)\]")
_MARKER_BODY_RE = re.compile(r"^(/?)([a-z]+)(?::(.*))?$")


def count_speakable(text: str) -> int:
    """CJK characters plus Latin alphanumerics, DSL markers excluded."""
    text = _MARKER_TOKEN_RE.sub("", text.replace("[[", ""))
    return len(_SPEAKABLE_RE.findall(text))


# ============================================================================
# AST
# ============================================================================

@dataclass(frozen=True)
class Text:
    content: str


@dataclass(frozen=True)
class Pause:
    duration_ms: int = DEFAULT_PAUSE_MS


@dataclass(frozen=True)
class Applause:
    pass


@dataclass(frozen=True)
class Laughter:
    pass


@dataclass(frozen=True)
class EmphasisSpan:
    children: Tuple["Node", ...]


@dataclass(frozen=True)
class PaceSpan:
    rate: float
    children: Tuple["Node", ...]


Node = Union[Text, Pause, Applause, Laughter, EmphasisSpan, PaceSpan]


@dataclass(frozen=True)
class AnnotatedScript:
    """Parsed performance script. Adjacent text runs are always merged."""
    nodes: Tuple[Node, ...] = field(default_factory=tuple)

    def walk(self) -> Iterator[Node]:
        yield from _walk(self.nodes)


def _walk(nodes) -> Iterator[Node]:
    for node in nodes:
        yield node
        if isinstance(node, (EmphasisSpan, PaceSpan)):
            yield from _walk(node.children)


def _merge_text(nodes: List[Node]) -> Tuple[Node, ...]:
    merged: List[Node] = []
    for node in nodes:
        if isinstance(node, Text):
            if not node.content:
                continue
            if merged and isinstance(merged[-1], Text):
                merged[-1] = Text(merged[-1].content + node.content)
                continue
        merged.append(node)
    return tuple(merged)


# ============================================================================
# PARSER
# ============================================================================

class _Frame:
    """An open span on the parser stack."""

    def __init__(self, kind: str, rate: float, line: int, column: int):
        self.kind = kind
        self.rate = rate
        self.line = line
        self.column = column
        self.children: List[Node] = []


def _position(text: str, offset: int) -> Tuple[int, int]:
    line = text.count("\n", 0, offset) + 1
    column = offset - (text.rfind("\n", 0, offset) + 1) + 1
    return line, column


def _parse_pause(arg: Optional[str], line: int, column: int, default_ms: int) -> Pause:
    if arg is None:
        return Pause(default_ms)
    if not re.fullmatch(r"\d+", arg.strip()):
        raise MalformedDuration(f"pause duration {arg!r} is not an integer", line, column)
    ms = int(arg.strip())
    if not PAUSE_RANGE[0] <= ms <= PAUSE_RANGE[1]:
        raise MalformedDuration(f"pause {ms} ms outside {PAUSE_RANGE[0]}..{PAUSE_RANGE[1]}", line, column)
    return Pause(ms)


def _parse_rate(arg: Optional[str], line: int, column: int) -> float:
    try:
        rate = float((arg or "").strip())
    except ValueError:
        raise MalformedDuration(f"pace rate {arg!r} is not a number", line, column)
    if not RATE_RANGE[0] <= rate <= RATE_RANGE[1]:
        raise MalformedDuration(f"pace rate {rate} outside {RATE_RANGE[0]}..{RATE_RANGE[1]}", line, column)
    return rate


def parse_markup(text: str, strict: bool = True, default_pause_ms: int = DEFAULT_PAUSE_MS) -> AnnotatedScript:
    """
    Parse marked-up script text into an AnnotatedScript.

    Args:
        text: Script with DSL markers
        strict: Unknown bracketed tokens raise UnknownMarker; when False they
                are kept as literal text
        default_pause_ms: Length of a bare [pause]

    Raises:
        UnclosedSpan, UnknownMarker, MalformedDuration, NestingViolation, EmptySpan
    """
    root = _Frame("root", 1.0, 1, 1)
    stack: List[_Frame] = [root]
    buffer: List[str] = []
    i = 0

    def flush():
        if buffer:
            stack[-1].children.append(Text("".join(buffer)))
            buffer.clear()

    while i < len(text):
        ch = text[i]
        if ch != "[":
            buffer.append(ch)
            i += 1
            continue
        if text.startswith("[[", i):
            buffer.append("[")
            i += 2
            continue

        line, column = _position(text, i)
        close = text.find("]", i + 1)
        nested_open = text.find("[", i + 1)
        if close == -1 or (nested_open != -1 and nested_open < close):
            if strict:
                raise UnknownMarker("'[' without a closing ']' (write '[[' for a literal bracket)", line, column)
            buffer.append(ch)
            i += 1
            continue

        token = text[i + 1:close]
        match = _MARKER_BODY_RE.match(token)
        closing, name, arg = (match.group(1), match.group(2), match.group(3)) if match else ("", "", None)
        known = name in ("pause", "applause", "laughter", "emphasis", "pace")
        bare_only = name in ("applause", "laughter", "emphasis") or closing
        if not known or (bare_only and arg is not None) or (closing and name not in ("emphasis", "pace")):
            if strict:
                raise UnknownMarker(f"unknown marker [{token}]", line, column)
            buffer.append(text[i:close + 1])
            i = close + 1
            continue

        flush()
        if closing:
            top = stack[-1]
            if top.kind == "root":
                raise NestingViolation(f"[/{name}] closes nothing", line, column)
            if top.kind != name:
                raise NestingViolation(f"[/{name}] crosses open [{top.kind}] from line {top.line}", line, column)
            stack.pop()
            children = _merge_text(top.children)
            if not children:
                raise EmptySpan(f"empty [{name}] span", top.line, top.column)
            span = EmphasisSpan(children) if name == "emphasis" else PaceSpan(top.rate, children)
            stack[-1].children.append(span)
        elif name == "pause":
            stack[-1].children.append(_parse_pause(arg, line, column, default_pause_ms))
        elif name == "applause":
            stack[-1].children.append(Applause())
        elif name == "laughter":
            stack[-1].children.append(Laughter())
        elif name == "emphasis":
            stack.append(_Frame("emphasis", 1.0, line, column))
        else:
            stack.append(_Frame("pace", _parse_rate(arg, line, column), line, column))
        i = close + 1

    flush()
    if len(stack) > 1:
        end_line, end_column = _position(text, len(text))
        top = stack[-1]
        raise UnclosedSpan(
            f"[{top.kind}] opened at line {top.line}, column {top.column} is never closed",
            end_line, end_column,
        )
    return AnnotatedScript(_merge_text(root.children))


# ============================================================================
# RENDER / STRIP
# ============================================================================

def _format_rate(rate: float) -> str:
    # shortest repr that reads back to the same float; whole rates drop ".0"
    if rate.is_integer():
        return str(int(rate))
    return repr(rate)


def _render_nodes(nodes) -> str:
    parts = []
    for node in nodes:
        if isinstance(node, Text):
            parts.append(node.content.replace("[", "[["))
        elif isinstance(node, Pause):
            parts.append(f"[pause:{node.duration_ms}]")
        elif isinstance(node, Applause):
            parts.append("[applause]")
        elif isinstance(node, Laughter):
            parts.append("[laughter]")
        elif isinstance(node, EmphasisSpan):
            parts.append(f"[emphasis]{_render_nodes(node.children)}[/emphasis]")
        elif isinstance(node, PaceSpan):
            parts.append(f"[pace:{_format_rate(node.rate)}]{_render_nodes(node.children)}[/pace]")
    return "".join(parts)


def render(ast: AnnotatedScript) -> str:
    """Canonical marker syntax; parse(render(ast)) == ast."""
    return _render_nodes(ast.nodes)


def strip_plain(ast: AnnotatedScript) -> str:
    """All text content in order, markers dropped."""
    return "".join(node.content for node in ast.walk() if isinstance(node, Text))


# ============================================================================
# TIMELINE
# ============================================================================

class Segment(BaseModel):
    kind: str = Field(pattern=r"^(speech|silence|applause_cue|laughter_cue)$")
    start_ms: int = Field(ge=0)
    duration_ms: int = Field(gt=0)
    text: Optional[str] = None
    emphasis: bool = False
    rate: float = 1.0


class Timeline(BaseModel):
    chars_per_minute: int = Field(gt=0)
    segments: List[Segment] = Field(min_length=1)

    @model_validator(mode="after")
    def _contiguous(self):
        cursor = 0
        for i, seg in enumerate(self.segments):
            if seg.start_ms != cursor:
                raise ValueError(f"segment {i} starts at {seg.start_ms}, expected {cursor}")
            cursor += seg.duration_ms
        return self

    @property
    def total_ms(self) -> int:
        return sum(seg.duration_ms for seg in self.segments)


def speech_duration_ms(text: str, chars_per_minute: int, rate: float = 1.0) -> int:
    return round(60000 * count_speakable(text) / (chars_per_minute * rate))


def _timed_nodes(nodes, emphasis: bool, rate: float, applause_ms: int, laughter_ms: int,
                 chars_per_minute: int) -> Iterator[Tuple[str, int, Optional[str], bool, float]]:
    for node in nodes:
        if isinstance(node, Text):
            duration = speech_duration_ms(node.content, chars_per_minute, rate)
            if duration > 0:
                yield ("speech", duration, node.content, emphasis, rate)
        elif isinstance(node, Pause):
            yield ("silence", node.duration_ms, None, emphasis, rate)
        elif isinstance(node, Applause):
            yield ("applause_cue", applause_ms, None, emphasis, rate)
        elif isinstance(node, Laughter):
            yield ("laughter_cue", laughter_ms, None, emphasis, rate)
        elif isinstance(node, EmphasisSpan):
            yield from _timed_nodes(node.children, True, rate, applause_ms, laughter_ms, chars_per_minute)
        elif isinstance(node, PaceSpan):
            yield from _timed_nodes(node.children, emphasis, node.rate, applause_ms, laughter_ms, chars_per_minute)


def compile_timeline(ast: AnnotatedScript, chars_per_minute: int,
                     applause_ms: int = DEFAULT_APPLAUSE_MS,
                     laughter_ms: int = DEFAULT_LAUGHTER_MS) -> Timeline:
    """
    Lay the script out as contiguous timed segments starting at 0.

    Raises:
        ValueError: chars_per_minute not positive
        EmptyScript: nothing with a duration
    """
    if chars_per_minute <= 0:
        raise ValueError("chars_per_minute must be positive")
    segments = []
    cursor = 0
    for kind, duration, text, emphasis, rate in _timed_nodes(
            ast.nodes, False, 1.0, applause_ms, laughter_ms, chars_per_minute):
        segments.append(Segment(kind=kind, start_ms=cursor, duration_ms=duration,
                                text=text, emphasis=emphasis, rate=rate))
        cursor += duration
    if not segments:
        raise EmptyScript("script has no speakable text and no cues")
    return Timeline(chars_per_minute=chars_per_minute, segments=segments)


def timeline_to_json(t: Timeline) -> str:
    doc = {
        "chars_per_minute": t.chars_per_minute,
        "total_ms": t.total_ms,
        "segments": [seg.model_dump() for seg in t.segments],
    }
    return json.dumps(doc, ensure_ascii=False, indent=2)


def export_timeline(t: Timeline, path) -> Path:
    """Write timeline.json; durations are integer milliseconds."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(timeline_to_json(t) + "\n", encoding="utf-8")
    return out


def load_timeline(path) -> Timeline:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    doc.pop("total_ms", None)
    return Timeline.model_validate(doc)
