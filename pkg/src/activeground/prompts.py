"""Grounding-prompt assembly: tokenization, knowledge segments, per-role masks.

The grounding text follows the schema
``{instruction} [SEP] {entity} pre-state is {conds} [SEP] {entity} post-state
is {conds} [SEP] {entity} description is {desc}`` with one segment per present
entity and enabled knowledge kind.  Segment lead-ins ("fish fillet pre-state
is") are prefix tokens: they keep the text parseable but never enter a mask.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .knowledge import KnowledgeBundle

MAX_PROMPT_TOKENS = 256
SEP = "[SEP]"

_TOKEN_RE = re.compile(r"\[SEP\]|[A-Za-z0-9]+(?:['-][A-Za-z0-9]+)*|[^\sA-Za-z0-9]", re.IGNORECASE)


class Role(str, Enum):
    OUC = "ouc"
    TOOL = "tool"


class FrameType(str, Enum):
    PRE = "pre"
    PNR = "pnr"
    POST = "post"


class SpanKind(str, Enum):
    MENTION = "mention"
    PRE_COND = "pre_cond"
    POST_COND = "post_cond"
    DESCRIPTION = "description"


class TokenKind(str, Enum):
    WORD = "word"
    SEPARATOR = "separator"
    PREFIX = "prefix"


@dataclass(frozen=True)
class Token:
    text: str
    start: int
    end: int
    kind: TokenKind


@dataclass(frozen=True)
class RoleSpan:
    role: Role
    kind: SpanKind
    start: int  # token index, inclusive
    end: int  # token index, exclusive


@dataclass
class GroundingPrompt:
    text: str
    tokens: list[Token]
    role_spans: list[RoleSpan] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tokens)

    def spans_for(self, role: Role, kind: SpanKind) -> list[RoleSpan]:
        return [s for s in self.role_spans if s.role == role and s.kind == kind]

    def token_texts(self) -> list[str]:
        return [t.text for t in self.tokens]

    def to_debug_json(self, masks: dict | None = None) -> dict:
        out = {
            "text": self.text,
            "tokens": [
                {"text": t.text, "span": [t.start, t.end], "kind": t.kind.value}
                for t in self.tokens
            ],
            "role_spans": [
                {"role": s.role.value, "kind": s.kind.value, "range": [s.start, s.end]}
                for s in self.role_spans
            ],
        }
        if masks is not None:
            out["masks"] = {
                f"{key[0].value}_{key[1].value}": mask.bits.astype(int).tolist()
                for key, mask in sorted(masks.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value))
            }
        return out


@dataclass
class RoleMask:
    role: Role
    frame_type: FrameType
    bits: np.ndarray  # bool vector, length == prompt token count

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def is_empty(self) -> bool:
        return not bool(self.bits.any())


class PromptBudgetError(ValueError):
    """Instruction alone exceeds the token budget; a mention would be dropped."""


def tokenize(text: str) -> list[Token]:
    """Lowercased word tokens with exact char spans; punctuation and [SEP] are separators."""
    tokens = []
    for m in _TOKEN_RE.finditer(text):
        raw = m.group(0)
        lowered = raw.lower()
        kind = TokenKind.WORD if raw[0].isalnum() else TokenKind.SEPARATOR
        if lowered == SEP.lower():
            kind = TokenKind.SEPARATOR
        tokens.append(Token(lowered, m.start(), m.end(), kind))
    return tokens


@dataclass(frozen=True)
class _Segment:
    role: Role
    kind: SpanKind
    prefix: str
    payload: str


def _knowledge_segments(bundle: "KnowledgeBundle", use_conditions: bool,
                        use_descriptions: bool) -> list[_Segment]:
    segments = []
    for role, entity in ((Role.OUC, bundle.ouc), (Role.TOOL, bundle.tool)):
        if entity is None:
            continue
        phrase = entity.phrase
        if use_conditions:
            pre = bundle.conditions(role, FrameType.PRE)
            if pre:
                segments.append(_Segment(role, SpanKind.PRE_COND,
                                          f"{phrase} pre-state is", ", ".join(pre)))
            post = bundle.conditions(role, FrameType.POST)
            if post:
                segments.append(_Segment(role, SpanKind.POST_COND,
                                          f"{phrase} post-state is", ", ".join(post)))
        if use_descriptions:
            desc = bundle.description(role)
            if desc:
                segments.append(_Segment(role, SpanKind.DESCRIPTION,
                                          f"{phrase} description is", desc))
    return segments


def _drop_one_segment(segments: list[_Segment]) -> list[_Segment]:
    # Whole segments are dropped from the tail, descriptions before conditions,
    # so mentions stay intact and the schema stays parseable.
    for i in range(len(segments) - 1, -1, -1):
        if segments[i].kind == SpanKind.DESCRIPTION:
            return segments[:i] + segments[i + 1:]
    return segments[:-1]


def _mention_char_spans(instruction_text: str, bundle: "KnowledgeBundle"):
    """Head text plus (role, char-span) mentions located in it.

    An OUC without a char span (the generic object-detection grounding phrase)
    replaces the instruction as the head text; its mention covers the whole head.
    """
    if bundle.ouc is None and bundle.tool is None:
        raise ValueError("bundle has no entities to ground")
    if bundle.ouc is not None and bundle.ouc.char_span is None:
        if bundle.tool is not None:
            raise ValueError("span-less OUC cannot be combined with a tool mention")
        head = bundle.ouc.phrase
        return head, [(Role.OUC, (0, len(head)))]
    mentions = []
    spans_seen = []
    for role, entity in ((Role.OUC, bundle.ouc), (Role.TOOL, bundle.tool)):
        if entity is None:
            continue
        if entity.char_span is None:
            raise ValueError(f"{role.value} mention has no char span into the instruction")
        start, end = entity.char_span
        if not (0 <= start < end <= len(instruction_text)):
            raise ValueError(f"{role.value} char span {entity.char_span} out of bounds")
        for s0, e0 in spans_seen:
            if start < e0 and s0 < end:
                raise ValueError("ouc and tool mention spans overlap")
        spans_seen.append((start, end))
        mentions.append((role, (start, end)))
    return instruction_text, mentions


def assemble_grounding_text(instruction_text: str, bundle: "KnowledgeBundle",
                            use_conditions: bool = True, use_descriptions: bool = True,
                            max_tokens: int = MAX_PROMPT_TOKENS) -> GroundingPrompt:
    """Assemble the knowledge-enriched grounding prompt for one instruction.

    Truncates to ``max_tokens`` by dropping whole trailing knowledge segments
    (descriptions first); raises PromptBudgetError if the instruction alone
    does not fit, since that would drop a mention.
    """
    head, mentions = _mention_char_spans(instruction_text, bundle)
    segments = _knowledge_segments(bundle, use_conditions, use_descriptions)
    while True:
        prompt = _build_prompt(head, mentions, segments)
        if len(prompt.tokens) <= max_tokens:
            return prompt
        if not segments:
            raise PromptBudgetError(
                f"instruction tokenizes to {len(prompt.tokens)} > {max_tokens} tokens")
        segments = _drop_one_segment(segments)


def _build_prompt(head: str, mentions, segments: list[_Segment]) -> GroundingPrompt:
    parts = [head]
    cursor = len(head)
    prefix_ranges = []
    payload_ranges = []  # aligned with segments
    for seg in segments:
        sep_piece = f" {SEP} "
        parts.append(sep_piece)
        cursor += len(sep_piece)
        parts.append(seg.prefix)
        prefix_ranges.append((cursor, cursor + len(seg.prefix)))
        cursor += len(seg.prefix)
        parts.append(" ")
        cursor += 1
        parts.append(seg.payload)
        payload_ranges.append((cursor, cursor + len(seg.payload)))
        cursor += len(seg.payload)
    text = "".join(parts)

    tokens = tokenize(text)
    retyped = []
    for tok in tokens:
        kind = tok.kind
        if kind == TokenKind.WORD and _covered(tok, prefix_ranges):
            kind = TokenKind.PREFIX
        retyped.append(Token(tok.text, tok.start, tok.end, kind))
    tokens = retyped

    role_spans = []
    for role, (start, end) in mentions:
        rng = _token_range(tokens, start, end, require_word=True)
        if rng is None:
            raise ValueError(f"{role.value} mention covers no word tokens")
        role_spans.append(RoleSpan(role, SpanKind.MENTION, *rng))
    for seg, (start, end) in zip(segments, payload_ranges):
        rng = _token_range(tokens, start, end, require_word=True)
        if rng is None:
            continue  # payload tokenized to nothing; segment contributes no span
        role_spans.append(RoleSpan(seg.role, seg.kind, *rng))
    return GroundingPrompt(text, tokens, role_spans)


def _covered(tok: Token, ranges) -> bool:
    return any(tok.start >= s and tok.end <= e for s, e in ranges)


def _token_range(tokens: list[Token], start: int, end: int, require_word: bool):
    idx = [i for i, t in enumerate(tokens) if t.start >= start and t.end <= end]
    if require_word and not any(tokens[i].kind == TokenKind.WORD for i in idx):
        return None
    if not idx:
        return None
    return idx[0], idx[-1] + 1


def build_role_masks(prompt: GroundingPrompt,
                     pnr_conditions: FrameType = FrameType.POST
                     ) -> dict[tuple[Role, FrameType], RoleMask]:
    """Frame-type-dependent masks per role over word tokens only.

    Pre masks carry pre-conditions, Post masks post-conditions; PNR masks carry
    post-conditions by default (post-condition diffusion), switchable to pre
    for ablation.  Descriptions are frame-invariant; prefixes and separators
    are always excluded.
    """
    if pnr_conditions not in (FrameType.PRE, FrameType.POST):
        raise ValueError("pnr_conditions must be FrameType.PRE or FrameType.POST")
    n = len(prompt.tokens)
    word = np.array([t.kind == TokenKind.WORD for t in prompt.tokens], dtype=bool)

    def span_bits(role: Role, kinds) -> np.ndarray:
        bits = np.zeros(n, dtype=bool)
        for s in prompt.role_spans:
            if s.role == role and s.kind in kinds:
                bits[s.start:s.end] = True
        return bits & word

    cond_kind = {
        FrameType.PRE: SpanKind.PRE_COND,
        FrameType.POST: SpanKind.POST_COND,
        FrameType.PNR: SpanKind.POST_COND if pnr_conditions == FrameType.POST else SpanKind.PRE_COND,
    }
    masks = {}
    for role in Role:
        for ft in FrameType:
            bits = span_bits(role, (SpanKind.MENTION, cond_kind[ft], SpanKind.DESCRIPTION))
            masks[(role, ft)] = RoleMask(role, ft, bits)
    return masks
