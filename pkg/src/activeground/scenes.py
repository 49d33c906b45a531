"""Synthetic episodes and tracking sequences, plus ingestion of annotation files.

Regions stand in for detector region proposals: each carries a box and an
appearance feature built as noun one-hot + state-attribute one-hot + noise,
L2-normalized.  Gold boxes always coincide with one candidate region, which is
what lets the alignment model score candidates instead of regressing boxes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import BBox
from .knowledge import (EntityExtraction, Instruction, KnowledgeBundle, PromptTemplates,
                        Provenance, Source, find_span)
from .kvconfig import apply_kv, parse_kv_file
from .llm import replay_key
from .prompts import FrameType, Role

NOUN_BLOCK = 12
STATE_BLOCK = 12
NOISE_DIMS = 8
FEATURE_DIM = NOUN_BLOCK + STATE_BLOCK + NOISE_DIMS


class SchemaError(ValueError):
    """Annotation file violates the expected schema; message carries the JSON path."""


@dataclass(frozen=True)
class Region:
    box: BBox
    feature: np.ndarray
    is_candidate: bool = True


@dataclass
class Frame:
    frame_id: str
    t: float
    regions: list[Region]
    gold: dict[Role, list[BBox]]
    frame_type: FrameType | None = None

    def gold_boxes(self, role: Role) -> list[BBox]:
        return self.gold.get(role, [])


@dataclass
class Episode:
    episode_id: str
    clip_id: str
    instruction: Instruction
    frames: list[Frame]
    gold_bundle: KnowledgeBundle | None = None

    def typed_frame(self, frame_type: FrameType) -> Frame:
        for fr in self.frames:
            if fr.frame_type == frame_type:
                return fr
        raise ValueError(f"episode {self.episode_id} has no {frame_type.value} frame")

    def typed_frames(self) -> list[Frame]:
        return [fr for fr in self.frames if fr.frame_type is not None]


@dataclass
class TrackSequence:
    sequence_id: str
    instruction: Instruction
    frames: list[Frame]
    gold_bundle: KnowledgeBundle | None = None

    def __post_init__(self):
        if not self.frames or not self.frames[0].gold_boxes(Role.OUC):
            raise ValueError(f"sequence {self.sequence_id}: first frame must have a gold box")


@dataclass
class SceneConfig:
    image_width: int = 640
    image_height: int = 480
    distractors: int = 3
    noise_sigma: float = 0.05
    ambiguity: bool = False
    tool_probability: float = 0.7
    episodes_per_clip: int = 5
    # each entry is noun:verb:pre_state:post_state
    objects: list[str] = field(default_factory=lambda: [
        "fillet:slice:fresh:sliced",
        "pawpaw:cut:whole:halved",
        "drawer:open:closed:open",
        "sponge:dip:dry:wet",
        "shirt:fold:wrinkled:folded",
        "dough:knead:lumpy:smooth",
    ])
    tools: list[str] = field(default_factory=lambda: ["knife", "spinner", "bucket", "board"])

    @classmethod
    def load(cls, path: str) -> "SceneConfig":
        defaults = cls()
        fields_now = {k: getattr(defaults, k) for k in defaults.__dataclass_fields__}
        return cls(**apply_kv(fields_now, parse_kv_file(path), path))

    def object_specs(self) -> list[tuple[str, str, str, str]]:
        specs = []
        for entry in self.objects:
            parts = [p.strip() for p in entry.split(":")]
            if len(parts) != 4 or not all(parts):
                raise ValueError(f"bad object entry {entry!r}; expected noun:verb:pre:post")
            specs.append(tuple(parts))
        return specs

    def vocab(self) -> tuple[list[str], list[str]]:
        """(nouns incl. tools, state attributes) with stable ordering."""
        specs = self.object_specs()
        nouns = [s[0] for s in specs] + list(self.tools)
        states: list[str] = []
        for _, _, pre, post in specs:
            for state in (pre, post):
                if state not in states:
                    states.append(state)
        if len(set(nouns)) != len(nouns):
            raise ValueError("duplicate nouns in scene vocabulary")
        if len(nouns) > NOUN_BLOCK:
            raise ValueError(f"{len(nouns)} nouns exceed the {NOUN_BLOCK}-dim noun block")
        if len(states) > STATE_BLOCK:
            raise ValueError(f"{len(states)} states exceed the {STATE_BLOCK}-dim state block")
        return nouns, states


def make_feature(cfg: SceneConfig, noun: str, state: str | None,
                 rng: np.random.Generator) -> np.ndarray:
    nouns, states = cfg.vocab()
    vec = np.zeros(FEATURE_DIM)
    vec[nouns.index(noun)] = 1.0
    if state is not None:
        vec[NOUN_BLOCK + states.index(state)] = 1.0
    vec[NOUN_BLOCK + STATE_BLOCK:] = cfg.noise_sigma * rng.standard_normal(NOISE_DIMS)
    norm = np.linalg.norm(vec)
    return vec / norm


def _grid_boxes(n: int, cfg: SceneConfig, rng: np.random.Generator) -> list[BBox]:
    """n disjoint boxes, one per shuffled grid cell; 1 px inset keeps the
    2-decimal rounding from ever crossing a cell boundary."""
    side = int(np.ceil(np.sqrt(n)))
    cell_w = cfg.image_width / side
    cell_h = cfg.image_height / side
    cells = [(r, c) for r in range(side) for c in range(side)]
    rng.shuffle(cells)
    boxes = []
    inset = 1.0
    for r, c in cells[:n]:
        w = (0.3 + 0.4 * rng.random()) * (cell_w - 2 * inset) * 0.8
        h = (0.3 + 0.4 * rng.random()) * (cell_h - 2 * inset) * 0.8
        x0 = c * cell_w + inset + rng.random() * (cell_w - 2 * inset - w)
        y0 = r * cell_h + inset + rng.random() * (cell_h - 2 * inset - h)
        boxes.append(BBox(round(x0, 2), round(y0, 2), round(x0 + w, 2), round(y0 + h, 2)))
    return boxes


def _gold_bundle(instr: Instruction, noun: str, pre: str, post: str,
                 tool: str | None) -> KnowledgeBundle:
    ouc_span = find_span(instr.text, noun)
    assert ouc_span is not None
    ouc = EntityExtraction(noun, ouc_span, Provenance.GT_LABEL)
    tool_entity = None
    bundle = KnowledgeBundle(instr.id, instr.text, ouc=ouc)
    if tool is not None:
        tool_span = find_span(instr.text, tool, forbidden=(ouc_span,))
        assert tool_span is not None
        tool_entity = EntityExtraction(tool, tool_span, Provenance.GT_LABEL)
        bundle.tool = tool_entity
        bundle.tool_desc = f"a sturdy {tool}"
    bundle.ouc_pre = [pre]
    bundle.ouc_post = [post]
    bundle.ouc_desc = f"a household {noun}"
    return bundle


def generate_episode(seed: int, cfg: SceneConfig | None = None) -> Episode:
    """One deterministic synthetic episode with Pre/PNR/Post frames.

    Scene state is coherent per frame: every stateful region shows its own
    pre-state attribute in the Pre frame and its post-state in PNR/Post.  In
    ambiguity mode each frame carries a second region with the target's noun
    but the opposite state (an already-changed or not-yet-changed instance),
    which ties instruction-only grounding while condition knowledge separates
    the two.
    """
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(seed)
    specs = cfg.object_specs()
    noun, verb, pre_state, post_state = specs[int(rng.integers(len(specs)))]
    use_tool = bool(rng.random() < cfg.tool_probability) and cfg.tools
    tool = str(cfg.tools[int(rng.integers(len(cfg.tools)))]) if use_tool else None

    distractor_pool = [s for s in specs if s[0] != noun]
    tool_pool = [t for t in cfg.tools if t != tool]
    pool: list[tuple[str, str | None]] = [(s[0], (s[2], s[3])) for s in distractor_pool]
    pool += [(t, None) for t in tool_pool]
    if cfg.distractors > len(pool):
        raise ValueError(f"vocabulary too small for {cfg.distractors} distractors")
    pick = rng.permutation(len(pool))[:cfg.distractors]
    distractors = [pool[int(i)] for i in pick]

    episode_id = f"ep{seed:06d}"
    text = f"{verb} the {noun} with the {tool}" if tool else f"{verb} the {noun}"
    instr = Instruction(episode_id, text, Source.SYNTHETIC)
    bundle = _gold_bundle(instr, noun, pre_state, post_state, tool)

    frames = []
    for k, (ftype, t_s) in enumerate(((FrameType.PRE, 0.0), (FrameType.PNR, 1.0),
                                      (FrameType.POST, 2.0))):
        is_pre = ftype == FrameType.PRE
        ouc_state = pre_state if is_pre else post_state
        entries: list[tuple[str, str | None, Role | None]] = [(noun, ouc_state, Role.OUC)]
        if tool:
            entries.append((tool, None, Role.TOOL))
        if cfg.ambiguity:
            entries.append((noun, post_state if is_pre else pre_state, None))
        for d_noun, d_states in distractors:
            d_state = (d_states[0] if is_pre else d_states[1]) if d_states else None
            entries.append((d_noun, d_state, None))
        order = rng.permutation(len(entries))
        entries = [entries[int(i)] for i in order]
        boxes = _grid_boxes(len(entries), cfg, rng)
        regions = []
        gold: dict[Role, list[BBox]] = {Role.OUC: [], Role.TOOL: []}
        for (e_noun, e_state, e_role), box in zip(entries, boxes):
            regions.append(Region(box, make_feature(cfg, e_noun, e_state, rng)))
            if e_role is not None:
                gold[e_role].append(box)
        frames.append(Frame(f"{episode_id}/{k}", t_s, regions, gold, ftype))
    clip_id = f"clip{seed // max(cfg.episodes_per_clip, 1):06d}"
    return Episode(episode_id, clip_id, instr, frames, bundle)


def generate_corpus(n: int, cfg: SceneConfig | None = None, seed0: int = 0) -> list[Episode]:
    return [generate_episode(seed0 + i, cfg) for i in range(n)]


def jitter_frames(ep: Episode, window_s: float, k: int, seed: int,
                  cfg: SceneConfig | None = None) -> Episode:
    """Append k near-duplicate frames per typed frame (timestamp within
    ±window_s, positions perturbed at most 2 px) to expand frame-type
    training data.  Boxes are clamped to the image extent."""
    if window_s <= 0:
        raise ValueError("window_s must be positive")
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(seed)
    extra: list[Frame] = []
    counter = len(ep.frames)
    for fr in list(ep.frames):
        if fr.frame_type is None:
            continue
        for _ in range(k):
            dt = float(rng.uniform(-window_s, window_s))
            regions = []
            moved: dict[tuple[float, float, float, float], BBox] = {}
            for region in fr.regions:
                box = region.box
                dx = float(rng.uniform(-2.0, 2.0))
                dy = float(rng.uniform(-2.0, 2.0))
                dx = min(max(dx, -box.x_min), cfg.image_width - box.x_max)
                dy = min(max(dy, -box.y_min), cfg.image_height - box.y_max)
                new_box = box.shifted(dx, dy)
                moved[(box.x_min, box.y_min, box.x_max, box.y_max)] = new_box
                regions.append(Region(new_box, region.feature, region.is_candidate))
            gold = {
                role: [moved.get((b.x_min, b.y_min, b.x_max, b.y_max), b) for b in boxes]
                for role, boxes in fr.gold.items()
            }
            extra.append(Frame(f"{ep.episode_id}/{counter}", round(fr.t + dt, 4),
                               regions, gold, fr.frame_type))
            counter += 1
    return replace(ep, frames=list(ep.frames) + extra)


def generate_track_sequence(seed: int, cfg: SceneConfig | None = None,
                            n_frames: int = 12, occlude: bool = True) -> TrackSequence:
    """Tracking sequence: target drifts, optionally disappears (occlusion,
    empty gold) and re-enters far from where it was lost."""
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(seed)
    specs = cfg.object_specs()
    noun, verb, pre_state, post_state = specs[int(rng.integers(len(specs)))]
    seq_id = f"seq{seed:06d}"
    instr = Instruction(seq_id, f"{verb} the {noun}", Source.SYNTHETIC)
    bundle = _gold_bundle(instr, noun, pre_state, post_state, None)

    pool = [s for s in specs if s[0] != noun]
    if cfg.distractors > len(pool) + len(cfg.tools):
        raise ValueError(f"vocabulary too small for {cfg.distractors} distractors")
    d_entries: list[tuple[str, str | None]] = [(s[0], s[2]) for s in pool]
    d_entries += [(t, None) for t in cfg.tools]
    pick = rng.permutation(len(d_entries))[:cfg.distractors]
    distractors = [d_entries[int(i)] for i in pick]

    w, h = cfg.image_width, cfg.image_height
    box_w, box_h = 0.08 * w, 0.10 * h
    start = np.array([0.12 * w, 0.15 * h])
    far = np.array([0.80 * w, 0.75 * h])
    occ_lo = n_frames // 3
    occ_hi = 2 * n_frames // 3
    # static distractors parked along the top edge, clear of both target paths
    d_boxes = []
    for i, _ in enumerate(distractors):
        x0 = (0.30 + 0.12 * i) * w
        d_boxes.append(BBox(round(x0, 2), round(0.01 * h, 2),
                            round(x0 + box_w, 2), round(0.01 * h + box_h, 2)))

    target_feature = make_feature(cfg, noun, pre_state, rng)
    d_features = [make_feature(cfg, dn, ds, rng) for dn, ds in distractors]

    frames = []
    for k in range(n_frames):
        occluded = occlude and occ_lo <= k < occ_hi
        regions = [Region(b, f) for b, f in zip(d_boxes, d_features)]
        gold: dict[Role, list[BBox]] = {Role.OUC: [], Role.TOOL: []}
        if not occluded:
            if occlude and k >= occ_hi:
                anchor, drift = far, 3.0 * (k - occ_hi)  # re-enters far from the loss point
            else:
                anchor, drift = start, 3.0 * k
            cx = float(anchor[0] + drift + rng.uniform(-1, 1))
            cy = float(anchor[1] + drift + rng.uniform(-1, 1))
            box = BBox(round(cx, 2), round(cy, 2),
                       round(cx + box_w, 2), round(cy + box_h, 2))
            regions.append(Region(box, target_feature))
            gold[Role.OUC] = [box]
        frames.append(Frame(f"{seq_id}/{k}", 0.5 * k, regions, gold, None))
    return TrackSequence(seq_id, instr, frames, bundle)


# ---------------------------------------------------------------------------
# replay stub generation for the synthetic corpus

def build_replay_stub(episodes_or_sequences, templates: PromptTemplates | None = None
                      ) -> dict[str, str]:
    """Replay-client map whose responses reproduce each gold bundle through
    the extraction pipeline, so synthetic corpora run the full LLM path
    deterministically."""
    templates = templates or PromptTemplates.default()
    out: dict[str, str] = {}
    for item in episodes_or_sequences:
        instr, bundle = item.instruction, item.gold_bundle
        if bundle is None or bundle.ouc is None:
            raise ValueError(f"{instr.id}: gold bundle required to build a replay stub")
        tool_phrase = bundle.tool.phrase if bundle.tool else "None"
        out[replay_key(templates.system_role, templates.entity.format(instruction=instr.text))] = \
            f"OUC: {bundle.ouc.phrase} | TOOL: {tool_phrase}"
        for entity, pre, post, desc in (
                (bundle.ouc, bundle.ouc_pre, bundle.ouc_post, bundle.ouc_desc),
                (bundle.tool, bundle.tool_pre, bundle.tool_post, bundle.tool_desc)):
            if entity is None:
                continue
            cond_prompt = templates.conditions.format(instruction=instr.text, entity=entity.phrase)
            pre_s = ", ".join(pre) if pre else "None"
            post_s = ", ".join(post) if post else "None"
            out[replay_key(templates.system_role, cond_prompt)] = f"PRE: {pre_s} | POST: {post_s}"
            desc_prompt = templates.description.format(entity=entity.phrase)
            out[replay_key(templates.system_role, desc_prompt)] = f"DESC: {desc or 'None'}"
    return out


# ---------------------------------------------------------------------------
# file IO

def _require(cond: bool, path: str, message: str):
    if not cond:
        raise SchemaError(f"{path}: {message}")


def _load_box(doc, path: str) -> BBox:
    _require(isinstance(doc, list) and len(doc) == 4, path, "box must be [x0,y0,x1,y1]")
    try:
        return BBox.from_list(doc)
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def _load_regions(doc, path: str, feature_dim: list) -> list[Region]:
    _require(isinstance(doc, list) and doc, path, "needs a non-empty region list")
    regions = []
    for i, item in enumerate(doc):
        rpath = f"{path}[{i}]"
        _require(isinstance(item, dict) and "box" in item and "feature" in item,
                 rpath, "region needs 'box' and 'feature'")
        box = _load_box(item["box"], f"{rpath}.box")
        feature = np.asarray(item["feature"], dtype=float)
        _require(feature.ndim == 1 and feature.size > 0, f"{rpath}.feature",
                 "feature must be a flat number list")
        if not feature_dim:
            feature_dim.append(feature.size)
        _require(feature.size == feature_dim[0], f"{rpath}.feature",
                 f"feature dim {feature.size} != {feature_dim[0]} used elsewhere in the file")
        regions.append(Region(box, feature, bool(item.get("is_candidate", True))))
    return regions


def frame_to_json(frame: Frame, with_type: bool) -> dict:
    doc: dict = {}
    if with_type:
        doc["type"] = frame.frame_type.value if frame.frame_type else None
    doc["t"] = frame.t
    doc["regions"] = [{"box": r.box.to_list(), "feature": r.feature.tolist()}
                      for r in frame.regions]
    if with_type:
        doc["gold"] = {role.value: [b.to_list() for b in frame.gold_boxes(role)]
                       for role in (Role.OUC, Role.TOOL)}
    else:
        doc["gold_ouc"] = [b.to_list() for b in frame.gold_boxes(Role.OUC)]
    return doc


def save_episodes(episodes: list[Episode], path: str):
    doc = {"episodes": [
        {"id": ep.episode_id, "clip_id": ep.clip_id, "instruction": ep.instruction.text,
         "frames": [frame_to_json(fr, with_type=True) for fr in ep.frames]}
        for ep in episodes
    ]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_episodes(path: str) -> list[Episode]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    _require(isinstance(doc, dict) and isinstance(doc.get("episodes"), list),
             "$", "expected an object with an 'episodes' list")
    episodes = []
    seen = set()
    feature_dim: list = []
    for i, ep_doc in enumerate(doc["episodes"]):
        epath = f"episodes[{i}]"
        _require(isinstance(ep_doc, dict), epath, "episode must be an object")
        for key in ("id", "clip_id", "instruction", "frames"):
            _require(key in ep_doc, epath, f"missing '{key}'")
        ep_id = ep_doc["id"]
        _require(ep_id not in seen, epath, f"duplicate episode id {ep_id!r}")
        seen.add(ep_id)
        instr = Instruction(ep_id, ep_doc["instruction"], Source.SYNTHETIC)
        frames = []
        by_type: dict[FrameType, int] = {}
        for k, fr_doc in enumerate(ep_doc["frames"]):
            fpath = f"{epath}.frames[{k}]"
            _require(isinstance(fr_doc, dict), fpath, "frame must be an object")
            _require(fr_doc.get("type") in ("pre", "pnr", "post"), f"{fpath}.type",
                     "frame type must be pre|pnr|post")
            ftype = FrameType(fr_doc["type"])
            regions = _load_regions(fr_doc.get("regions"), f"{fpath}.regions", feature_dim)
            gold_doc = fr_doc.get("gold")
            _require(isinstance(gold_doc, dict), f"{fpath}.gold", "missing gold map")
            gold = {}
            for role in (Role.OUC, Role.TOOL):
                boxes_doc = gold_doc.get(role.value, [])
                gold[role] = [_load_box(b, f"{fpath}.gold.{role.value}[{j}]")
                              for j, b in enumerate(boxes_doc)]
            _require(bool(gold[Role.OUC]), f"{fpath}.gold.ouc",
                     "typed frame must carry an OUC gold box")
            frames.append(Frame(f"{ep_id}/{k}", float(fr_doc.get("t", k)), regions, gold, ftype))
            by_type[ftype] = by_type.get(ftype, 0) + 1
        for ftype in FrameType:
            _require(by_type.get(ftype, 0) >= 1, f"{epath}.frames",
                     f"episode needs at least one {ftype.value} frame")
        episodes.append(Episode(ep_id, ep_doc["clip_id"], instr, frames))
    return episodes


def save_sequences(sequences: list[TrackSequence], path: str):
    doc = {"sequences": [
        {"id": seq.sequence_id, "instruction": seq.instruction.text,
         "frames": [frame_to_json(fr, with_type=False) for fr in seq.frames]}
        for seq in sequences
    ]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_sequences(path: str) -> list[TrackSequence]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    _require(isinstance(doc, dict) and isinstance(doc.get("sequences"), list),
             "$", "expected an object with a 'sequences' list")
    sequences = []
    seen = set()
    feature_dim: list = []
    for i, sq_doc in enumerate(doc["sequences"]):
        spath = f"sequences[{i}]"
        _require(isinstance(sq_doc, dict), spath, "sequence must be an object")
        for key in ("id", "instruction", "frames"):
            _require(key in sq_doc, spath, f"missing '{key}'")
        seq_id = sq_doc["id"]
        _require(seq_id not in seen, spath, f"duplicate sequence id {seq_id!r}")
        seen.add(seq_id)
        instr = Instruction(seq_id, sq_doc["instruction"], Source.SYNTHETIC)
        frames = []
        for k, fr_doc in enumerate(sq_doc["frames"]):
            fpath = f"{spath}.frames[{k}]"
            _require(isinstance(fr_doc, dict), fpath, "frame must be an object")
            regions = _load_regions(fr_doc.get("regions"), f"{fpath}.regions", feature_dim)
            gold_doc = fr_doc.get("gold_ouc", [])
            gold = [_load_box(b, f"{fpath}.gold_ouc[{j}]") for j, b in enumerate(gold_doc)]
            frames.append(Frame(f"{seq_id}/{k}", float(fr_doc.get("t", k)), regions,
                                {Role.OUC: gold, Role.TOOL: []}, None))
        _require(bool(frames), f"{spath}.frames", "sequence needs frames")
        _require(bool(frames[0].gold_boxes(Role.OUC)), f"{spath}.frames[0].gold_ouc",
                 "first frame must have a gold box (OPE initialization)")
        sequences.append(TrackSequence(seq_id, instr, frames))
    return sequences
