"""Instruction knowledge extraction: active entities, conditions, descriptions.

The pipeline sends format-forced prompts to a chat client, parses the strict
response grammar (``OUC: x | TOOL: y``, ``PRE: a, b | POST: c, d``), grounds
every extracted phrase back into the instruction (with a second re-grounding
query when needed) and falls back to a closed-vocabulary ARG1 heuristic when
the object undergoing change cannot be grounded at all.  Nothing is ever
fabricated: unparseable responses leave knowledge slots empty.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources

from .llm import LlmClient
from .prompts import FrameType, Role, TokenKind, tokenize

logger = logging.getLogger(__name__)

MAX_FORMAT_RETRIES = 2
OD_GENERIC_PHRASE = "Find the object of change."

STRATEGY_FULL_INSTRUCTION = "full_instruction"
STRATEGY_RANDOM_ENTITY = "random_entity"
STRATEGY_ARG1 = "arg1"
STRATEGY_GT_LABEL = "gt_label"
STRATEGY_OD_GENERIC = "od_generic"
STRATEGY_LLM = "llm"
GROUNDING_STRATEGIES = (STRATEGY_FULL_INSTRUCTION, STRATEGY_RANDOM_ENTITY, STRATEGY_ARG1,
                        STRATEGY_GT_LABEL, STRATEGY_OD_GENERIC)

_ENTITY_RE = re.compile(r"OUC:\s*(?P<ouc>.+?)\s*\|\s*TOOL:\s*(?P<tool>.+)", re.IGNORECASE)
_COND_RE = re.compile(r"PRE:\s*(?P<pre>.*?)\s*\|\s*POST:\s*(?P<post>.+)", re.IGNORECASE)
_REGROUND_RE = re.compile(r"GROUNDED:\s*(?P<phrase>.+)", re.IGNORECASE)
_DESC_RE = re.compile(r"DESC:\s*(?P<desc>.+)", re.IGNORECASE | re.DOTALL)
_SENTENCE_END_RE = re.compile(r"[.!?](?=\s|$)")


class ExtractionFormatError(RuntimeError):
    """Client response stayed unparseable after retries; carries the raw text for audit."""

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class Source(str, Enum):
    SCOD = "scod"
    TREK = "trek"
    SYNTHETIC = "synthetic"


class Provenance(str, Enum):
    LLM = "llm"
    LLM_REGROUNDED = "llm_regrounded"
    HEURISTIC_ARG1 = "heuristic_arg1"
    GT_LABEL = "gt_label"
    FULL_INSTRUCTION = "full_instruction"
    RANDOM_ENTITY = "random_entity"
    OD_GENERIC = "od_generic"


@dataclass(frozen=True)
class Instruction:
    id: str
    text: str
    source: Source = Source.SYNTHETIC

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"instruction {self.id!r} has empty text")


@dataclass(frozen=True)
class EntityExtraction:
    phrase: str
    char_span: tuple[int, int] | None
    provenance: Provenance


@dataclass
class KnowledgeBundle:
    """All extracted knowledge for one instruction."""

    instruction_id: str
    instruction_text: str
    ouc: EntityExtraction | None = None
    tool: EntityExtraction | None = None
    ouc_pre: list[str] = field(default_factory=list)
    ouc_post: list[str] = field(default_factory=list)
    tool_pre: list[str] = field(default_factory=list)
    tool_post: list[str] = field(default_factory=list)
    ouc_desc: str | None = None
    tool_desc: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.ouc is None and (self.ouc_pre or self.ouc_post or self.ouc_desc):
            raise ValueError("knowledge present for absent OUC")
        if self.tool is None and (self.tool_pre or self.tool_post or self.tool_desc):
            raise ValueError("knowledge present for absent tool")
        for conds in (self.ouc_pre, self.ouc_post, self.tool_pre, self.tool_post):
            if any(not c.strip() for c in conds):
                raise ValueError("empty condition phrase")
        for name, entity in (("ouc", self.ouc), ("tool", self.tool)):
            if entity is None or entity.char_span is None:
                continue
            start, end = entity.char_span
            if not (0 <= start < end <= len(self.instruction_text)):
                raise ValueError(f"{name} span {entity.char_span} out of bounds")
            covered = self.instruction_text[start:end]
            if normalize_phrase(covered) != normalize_phrase(entity.phrase):
                raise ValueError(
                    f"{name} span covers {covered!r}, not the phrase {entity.phrase!r}")

    def conditions(self, role: Role, frame_type: FrameType) -> list[str]:
        if frame_type == FrameType.PNR:
            raise ValueError("conditions are stored per pre/post; PNR gating happens in masks")
        if role == Role.OUC:
            return self.ouc_pre if frame_type == FrameType.PRE else self.ouc_post
        return self.tool_pre if frame_type == FrameType.PRE else self.tool_post

    def description(self, role: Role) -> str | None:
        return self.ouc_desc if role == Role.OUC else self.tool_desc


@dataclass(frozen=True)
class IntrinsicStats:
    role: str
    em_rate: float
    overlap_rate: float
    n: int


@dataclass(frozen=True)
class PromptTemplates:
    system_role: str
    entity: str
    reground: str
    conditions: str
    description: str

    @classmethod
    def load(cls, path: str) -> "PromptTemplates":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(**json.load(fh))

    @classmethod
    def default(cls) -> "PromptTemplates":
        raw = resources.files("activeground.data").joinpath("prompt_templates.json").read_text("utf-8")
        return cls(**json.loads(raw))


def _load_function_words() -> frozenset[str]:
    raw = resources.files("activeground.data").joinpath("function_words.json").read_text("utf-8")
    return frozenset(json.loads(raw)["function_words"])


FUNCTION_WORDS = _load_function_words()


# ---------------------------------------------------------------------------
# phrase normalization and grounding

def normalize_phrase(phrase: str) -> str:
    """Case-fold, strip surrounding punctuation, collapse whitespace."""
    folded = phrase.casefold().strip()
    folded = folded.strip(".,;:!?\"'()[]{}")
    return " ".join(folded.split())


def find_span(text: str, phrase: str,
              forbidden: tuple[tuple[int, int], ...] = ()) -> tuple[int, int] | None:
    """First occurrence of ``phrase`` in ``text`` (case/whitespace tolerant),
    skipping occurrences that overlap any forbidden span."""
    words = normalize_phrase(phrase).split()
    if not words:
        return None
    pattern = r"\b" + r"\s+".join(re.escape(w) for w in words) + r"\b"
    for m in re.finditer(pattern, text, re.IGNORECASE):
        if any(m.start() < e and s < m.end() for s, e in forbidden):
            continue
        return (m.start(), m.end())
    return None


def is_groundable(text: str, phrase: str) -> bool:
    return find_span(text, phrase) is not None


def _grounded_extraction(instr: Instruction, span: tuple[int, int],
                         provenance: Provenance) -> EntityExtraction:
    return EntityExtraction(instr.text[span[0]:span[1]], span, provenance)


# ---------------------------------------------------------------------------
# response parsing

def _none_like(phrase: str) -> bool:
    return normalize_phrase(phrase) in ("none", "")


def _parse_entity_response(raw: str) -> tuple[str | None, str | None]:
    for line in raw.splitlines():
        m = _ENTITY_RE.search(line)
        if m:
            ouc, tool = m.group("ouc").strip(), m.group("tool").strip()
            return (None if _none_like(ouc) else ouc,
                    None if _none_like(tool) else tool)
    raise ExtractionFormatError("response does not match 'OUC: … | TOOL: …'", raw)


def _parse_condition_list(slot: str) -> list[str]:
    conds = []
    for piece in slot.split(","):
        piece = piece.strip()
        if piece and not _none_like(piece):
            conds.append(piece)
    return conds


def _send_with_retries(client: LlmClient, system_role: str, prompt: str, parse):
    """Send, parse, and re-ask up to MAX_FORMAT_RETRIES times on parse failure."""
    last: ExtractionFormatError | None = None
    for _ in range(1 + MAX_FORMAT_RETRIES):
        raw = client.send(system_role, prompt)
        try:
            return parse(raw)
        except ExtractionFormatError as exc:
            last = exc
    assert last is not None
    raise last


# ---------------------------------------------------------------------------
# extraction operations

def heuristic_arg1(instr: Instruction) -> EntityExtraction:
    """First noun-phrase-like span after the leading imperative verb.

    Drops the first token, skips leading function words, then returns the
    maximal contiguous run of non-function words before the next function
    word (typically a preposition).
    """
    words = [t for t in tokenize(instr.text) if t.kind == TokenKind.WORD]
    if not words:
        raise ValueError(f"instruction {instr.id!r} has no word tokens")
    if len(words) == 1:
        tok = words[0]
        return _grounded_extraction(instr, (tok.start, tok.end), Provenance.HEURISTIC_ARG1)
    rest = words[1:]
    i = 0
    while i < len(rest) and rest[i].text in FUNCTION_WORDS:
        i += 1
    j = i
    while j < len(rest) and rest[j].text not in FUNCTION_WORDS:
        j += 1
    run = rest[i:j]
    if not run:
        run = [rest[0]]  # all function words after the verb; keep something groundable
    span = (run[0].start, run[-1].end)
    return _grounded_extraction(instr, span, Provenance.HEURISTIC_ARG1)


def regrounding_pass(raw: str, instr: Instruction, client: LlmClient,
                     templates: PromptTemplates,
                     forbidden: tuple[tuple[int, int], ...] = ()) -> EntityExtraction | None:
    """Turn a candidate phrase into an instruction-groundable extraction.

    A phrase that is already a substring of the instruction is returned
    without any client call; otherwise one re-grounding query is made and its
    answer is grounded, or None is returned when that also fails.
    """
    span = find_span(instr.text, raw, forbidden)
    if span is not None:
        return _grounded_extraction(instr, span, Provenance.LLM)

    prompt = templates.reground.format(instruction=instr.text, entity=raw)

    def parse(text: str) -> str:
        m = _REGROUND_RE.search(text)
        if not m:
            raise ExtractionFormatError("response does not match 'GROUNDED: …'", text)
        return m.group("phrase").strip()

    try:
        phrase = _send_with_retries(client, templates.system_role, prompt, parse)
    except ExtractionFormatError:
        logger.warning("re-grounding response unparseable for %r on %s", raw, instr.id)
        return None
    if _none_like(phrase):
        return None
    span = find_span(instr.text, phrase, forbidden)
    if span is None:
        logger.warning("re-grounded phrase %r still not in instruction %s", phrase, instr.id)
        return None
    return _grounded_extraction(instr, span, Provenance.LLM_REGROUNDED)


def extract_entities(instr: Instruction, client: LlmClient,
                     templates: PromptTemplates | None = None
                     ) -> tuple[EntityExtraction | None, EntityExtraction | None]:
    """OUC and tool extraction with re-grounding and the ARG1 fallback.

    Raises ExtractionFormatError when the entity response stays unparseable
    after retries (the corpus pipeline catches it and falls back), and
    LlmTransportError on wire failures.
    """
    templates = templates or PromptTemplates.default()
    prompt = templates.entity.format(instruction=instr.text)
    ouc_raw, tool_raw = _send_with_retries(client, templates.system_role, prompt,
                                           _parse_entity_response)

    ouc = None
    if ouc_raw is not None:
        ouc = regrounding_pass(ouc_raw, instr, client, templates)
        if ouc is None:
            ouc = heuristic_arg1(instr)
    tool = None
    if tool_raw is not None:
        forbidden = (ouc.char_span,) if ouc is not None and ouc.char_span else ()
        tool = regrounding_pass(tool_raw, instr, client, templates, forbidden)
    return ouc, tool


def extract_conditions(instr: Instruction, ouc: EntityExtraction | None,
                       tool: EntityExtraction | None, client: LlmClient,
                       templates: PromptTemplates | None = None
                       ) -> tuple[list[str], list[str], list[str], list[str]]:
    """Pre/post attribute phrases per present entity; unparseable slots stay empty."""
    if ouc is None and tool is None:
        raise ValueError("at least one entity is required for condition extraction")
    templates = templates or PromptTemplates.default()

    def parse(text: str) -> tuple[list[str], list[str]]:
        for line in text.splitlines():
            m = _COND_RE.search(line)
            if m:
                return _parse_condition_list(m.group("pre")), _parse_condition_list(m.group("post"))
        raise ExtractionFormatError("response does not match 'PRE: … | POST: …'", text)

    def query(entity: EntityExtraction) -> tuple[list[str], list[str]]:
        prompt = templates.conditions.format(instruction=instr.text, entity=entity.phrase)
        try:
            return _send_with_retries(client, templates.system_role, prompt, parse)
        except ExtractionFormatError as exc:
            logger.warning("condition response unparseable for %r on %s: %r",
                           entity.phrase, instr.id, exc.raw[:120])
            return [], []

    ouc_pre, ouc_post = query(ouc) if ouc is not None else ([], [])
    tool_pre, tool_post = query(tool) if tool is not None else ([], [])
    return ouc_pre, ouc_post, tool_pre, tool_post


def extract_description(entity_phrase: str, client: LlmClient,
                        templates: PromptTemplates | None = None) -> str | None:
    """One-sentence description, cut at the first sentence boundary; None on parse failure."""
    if not entity_phrase.strip():
        raise ValueError("entity phrase is empty")
    templates = templates or PromptTemplates.default()
    prompt = templates.description.format(entity=entity_phrase)

    def parse(text: str) -> str:
        m = _DESC_RE.search(text)
        if not m:
            raise ExtractionFormatError("response does not match 'DESC: …'", text)
        return m.group("desc").strip()

    try:
        desc = _send_with_retries(client, templates.system_role, prompt, parse)
    except ExtractionFormatError as exc:
        logger.warning("description response unparseable for %r: %r",
                       entity_phrase, exc.raw[:120])
        return None
    end = _SENTENCE_END_RE.search(desc)
    if end:
        desc = desc[:end.end()]
    desc = desc.strip()
    return desc or None


def select_grounding_phrase(strategy: str, instr: Instruction,
                            gt_label: str | None = None,
                            seed: int | None = None) -> EntityExtraction:
    """Baseline grounding-phrase selection; deterministic given (strategy, seed)."""
    if strategy == STRATEGY_FULL_INSTRUCTION:
        return EntityExtraction(instr.text, (0, len(instr.text)), Provenance.FULL_INSTRUCTION)
    if strategy == STRATEGY_OD_GENERIC:
        return EntityExtraction(OD_GENERIC_PHRASE, None, Provenance.OD_GENERIC)
    if strategy == STRATEGY_ARG1:
        return heuristic_arg1(instr)
    if strategy == STRATEGY_GT_LABEL:
        if gt_label is None:
            raise ValueError("gt_label strategy requires the gold phrase")
        span = find_span(instr.text, gt_label)
        if span is None:
            return heuristic_arg1(instr)
        return _grounded_extraction(instr, span, Provenance.GT_LABEL)
    if strategy == STRATEGY_RANDOM_ENTITY:
        if seed is None:
            raise ValueError("random_entity strategy requires a seed")
        words = [t for t in tokenize(instr.text) if t.kind == TokenKind.WORD]
        if not words:
            raise ValueError(f"instruction {instr.id!r} has no word tokens")
        candidates = [t for t in words[1:] if t.text not in FUNCTION_WORDS]
        if not candidates:
            candidates = words[-1:]
        tok = random.Random(seed).choice(candidates)
        return _grounded_extraction(instr, (tok.start, tok.end), Provenance.RANDOM_ENTITY)
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {GROUNDING_STRATEGIES}")


# ---------------------------------------------------------------------------
# corpus pipeline

def extract_bundle(instr: Instruction, client: LlmClient,
                   templates: PromptTemplates | None = None,
                   with_conditions: bool = True,
                   with_descriptions: bool = True) -> KnowledgeBundle:
    """Full per-instruction pipeline: entities, then conditions and descriptions.

    An unparseable entity response (after retries) falls back to the ARG1
    heuristic for the OUC with no tool, mirroring the ungroundable branch.
    """
    templates = templates or PromptTemplates.default()
    try:
        ouc, tool = extract_entities(instr, client, templates)
    except ExtractionFormatError as exc:
        logger.warning("entity extraction unparseable on %s, using ARG1: %r",
                       instr.id, exc.raw[:120])
        ouc, tool = heuristic_arg1(instr), None
    bundle = KnowledgeBundle(instr.id, instr.text, ouc=ouc, tool=tool)
    if (ouc is not None or tool is not None) and with_conditions:
        ouc_pre, ouc_post, tool_pre, tool_post = extract_conditions(
            instr, ouc, tool, client, templates)
        bundle.ouc_pre, bundle.ouc_post = ouc_pre, ouc_post
        bundle.tool_pre, bundle.tool_post = tool_pre, tool_post
    if with_descriptions:
        if ouc is not None:
            bundle.ouc_desc = extract_description(ouc.phrase, client, templates)
        if tool is not None:
            bundle.tool_desc = extract_description(tool.phrase, client, templates)
    bundle.validate()
    return bundle


def bundle_from_strategy(strategy: str, instr: Instruction,
                         gt_label: str | None = None,
                         seed: int | None = None) -> KnowledgeBundle:
    """Knowledge-free bundle whose OUC comes from a baseline strategy."""
    ouc = select_grounding_phrase(strategy, instr, gt_label=gt_label, seed=seed)
    return KnowledgeBundle(instr.id, instr.text, ouc=ouc)


# ---------------------------------------------------------------------------
# intrinsic evaluation

def eval_extraction(pairs: list[tuple[EntityExtraction | None, str]],
                    role: str = "ouc") -> IntrinsicStats:
    """Exact-match and full-coverage rates of predictions against gold phrases.

    Overlap counts a pair when the normalized gold token sequence appears as a
    contiguous run inside the normalized prediction tokens (the extraction
    fully covers the gold phrase).  Absent predictions miss both ways.
    """
    if not pairs:
        raise ValueError("no prediction/gold pairs; rates are undefined")
    em_hits = 0
    overlap_hits = 0
    for pred, gold in pairs:
        gold_norm = normalize_phrase(gold)
        if not gold_norm:
            raise ValueError("empty gold phrase")
        if pred is None:
            continue
        pred_norm = normalize_phrase(pred.phrase)
        em = pred_norm == gold_norm
        overlap = _contains_run(pred_norm.split(), gold_norm.split())
        assert not em or overlap, "exact match must imply full coverage"
        em_hits += em
        overlap_hits += overlap
    n = len(pairs)
    return IntrinsicStats(role, 100.0 * em_hits / n, 100.0 * overlap_hits / n, n)


def _contains_run(haystack: list[str], needle: list[str]) -> bool:
    if not needle or len(needle) > len(haystack):
        return False
    return any(haystack[i:i + len(needle)] == needle
               for i in range(len(haystack) - len(needle) + 1))


# ---------------------------------------------------------------------------
# cache and instruction file IO

def bundle_to_json(bundle: KnowledgeBundle) -> dict:
    def entity(e: EntityExtraction | None):
        if e is None:
            return None
        return {"phrase": e.phrase,
                "span": list(e.char_span) if e.char_span else None,
                "provenance": e.provenance.value}

    return {
        "id": bundle.instruction_id,
        "instruction": bundle.instruction_text,
        "ouc": entity(bundle.ouc),
        "tool": entity(bundle.tool),
        "conds": {"ouc_pre": bundle.ouc_pre, "ouc_post": bundle.ouc_post,
                  "tool_pre": bundle.tool_pre, "tool_post": bundle.tool_post},
        "desc": {"ouc": bundle.ouc_desc, "tool": bundle.tool_desc},
    }


def bundle_from_json(doc: dict) -> KnowledgeBundle:
    def entity(obj):
        if obj is None:
            return None
        span = tuple(obj["span"]) if obj.get("span") else None
        return EntityExtraction(obj["phrase"], span, Provenance(obj["provenance"]))

    conds = doc.get("conds", {})
    desc = doc.get("desc", {})
    return KnowledgeBundle(
        doc["id"], doc["instruction"],
        ouc=entity(doc.get("ouc")), tool=entity(doc.get("tool")),
        ouc_pre=list(conds.get("ouc_pre", [])), ouc_post=list(conds.get("ouc_post", [])),
        tool_pre=list(conds.get("tool_pre", [])), tool_post=list(conds.get("tool_post", [])),
        ouc_desc=desc.get("ouc"), tool_desc=desc.get("tool"),
    )


def save_cache(bundles: list[KnowledgeBundle], path: str):
    """JSON-lines knowledge cache, one bundle per line, canonical key order."""
    with open(path, "w", encoding="utf-8") as fh:
        for bundle in bundles:
            fh.write(json.dumps(bundle_to_json(bundle), sort_keys=True))
            fh.write("\n")


def load_cache(path: str) -> dict[str, KnowledgeBundle]:
    bundles: dict[str, KnowledgeBundle] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                bundle = bundle_from_json(json.loads(line))
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad knowledge cache line: {exc}") from exc
            if bundle.instruction_id in bundles:
                raise ValueError(f"{path}:{lineno}: duplicate bundle id {bundle.instruction_id!r}")
            bundles[bundle.instruction_id] = bundle
    return bundles


def load_instructions(path: str) -> list[tuple[Instruction, dict]]:
    """Instruction file: {"instructions": [{"id","text","source"?,"gold_ouc"?,"gold_tool"?}]}.

    Returns (instruction, gold) pairs where gold maps role name to the gold
    phrase or None.
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "instructions" not in doc:
        raise ValueError(f"{path}: expected an object with an 'instructions' list")
    out = []
    seen = set()
    for i, item in enumerate(doc["instructions"]):
        path_i = f"instructions[{i}]"
        if not isinstance(item, dict) or "id" not in item or "text" not in item:
            raise ValueError(f"{path}: {path_i}: needs 'id' and 'text'")
        if item["id"] in seen:
            raise ValueError(f"{path}: {path_i}: duplicate id {item['id']!r}")
        seen.add(item["id"])
        instr = Instruction(item["id"], item["text"], Source(item.get("source", "synthetic")))
        gold = {"ouc": item.get("gold_ouc"), "tool": item.get("gold_tool")}
        out.append((instr, gold))
    return out


def strip_knowledge(bundle: KnowledgeBundle, keep_conditions: bool,
                    keep_descriptions: bool) -> KnowledgeBundle:
    """Copy of the bundle with disabled knowledge kinds removed."""
    out = KnowledgeBundle(bundle.instruction_id, bundle.instruction_text,
                          ouc=bundle.ouc, tool=bundle.tool)
    if keep_conditions:
        out.ouc_pre, out.ouc_post = list(bundle.ouc_pre), list(bundle.ouc_post)
        out.tool_pre, out.tool_post = list(bundle.tool_pre), list(bundle.tool_post)
    if keep_descriptions:
        out.ouc_desc, out.tool_desc = bundle.ouc_desc, bundle.tool_desc
    return out
