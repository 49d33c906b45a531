"""Command-line surface: generate, extract, train, eval-det, eval-ope, report.

Reports are JSON first (sorted keys, deterministic bytes) with rendered text
tables on stdout.  All randomness flows from one --seed per command; derived
sub-seeds are split off by hashing.  Exit codes: 0 success, 1 usage error,
2 data/schema error, 3 external-client error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time

from . import __version__
from .det_metrics import EvalReport, top1_accuracy
from .estimator import ActiveObjectGrounder, resolve_bundles
from .inference import MIX_FIRST, POOL_FIRST, save_detections
from .knowledge import (GROUNDING_STRATEGIES, STRATEGY_LLM, ExtractionFormatError,
                        KnowledgeBundle, PromptTemplates, bundle_from_strategy, eval_extraction,
                        extract_bundle, load_cache, load_instructions, save_cache)
from .llm import HttpLlmClient, LlmClientConfig, LlmError, ReplayLlmClient
from .model import TrainConfig, load_checkpoint, save_checkpoint, train
from .prompts import FrameType, Role
from .scenes import (SceneConfig, SchemaError, build_replay_stub, generate_corpus,
                     generate_track_sequence, jitter_frames, load_episodes, load_sequences,
                     save_episodes, save_sequences)
from .tracking import MODE_OPE, MODE_OPE_DET, TrackerConfig, run_ope, summarize_runs

DET_REPORT_SCHEMA = "activeground-detreport/v1"
OPE_REPORT_SCHEMA = "activeground-opereport/v1"
KNOWLEDGE_MODES = ("none", "conds", "desc", "conds+desc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def derive_seed(seed: int, tag: str) -> int:
    """Stable sub-seed split so one --seed drives every random consumer."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode("utf-8")).hexdigest()
    return int(digest[:8], 16)


def _manifest(command: str, seed: int | None, inputs: dict, outputs: dict,
              extra: dict | None = None) -> dict:
    # Deterministic by design: wall-clock time is logged to stderr, never
    # embedded, so reruns stay byte-identical.
    doc = {
        "engine_version": __version__,
        "command": command,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
    }
    if extra:
        doc["settings"] = extra
    return doc


def _write_json(doc: dict, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_sidecar(path: str, manifest: dict):
    _write_json(manifest, path + ".manifest.json")


def _knowledge_flags(mode: str) -> tuple[bool, bool]:
    if mode not in KNOWLEDGE_MODES:
        raise UsageError(f"--knowledge must be one of {KNOWLEDGE_MODES}")
    return "conds" in mode, "desc" in mode


# ---------------------------------------------------------------------------
# generate

def cmd_generate(args) -> int:
    cfg = SceneConfig.load(args.scene_config) if args.scene_config else SceneConfig()
    if args.ambiguity:
        cfg.ambiguity = True
    outputs = {}
    instructions = []
    stub = {}

    if args.episodes > 0:
        episodes = generate_corpus(args.episodes, cfg, seed0=args.seed)
        if args.jitter > 0:
            episodes = [jitter_frames(ep, args.jitter_window, args.jitter,
                                      derive_seed(args.seed, ep.episode_id), cfg)
                        for ep in episodes]
        path = f"{args.out_dir}/episodes.json"
        save_episodes(episodes, path)
        outputs["episodes"] = path
        instructions.extend(episodes)
        stub.update(build_replay_stub(episodes))
    if args.sequences > 0:
        seqs = [generate_track_sequence(derive_seed(args.seed, f"seq{i}"), cfg,
                                        n_frames=args.track_frames,
                                        occlude=not args.no_occlusion)
                for i in range(args.sequences)]
        path = f"{args.out_dir}/sequences.json"
        save_sequences(seqs, path)
        outputs["sequences"] = path
        instructions.extend(seqs)
        stub.update(build_replay_stub(seqs))
    if not instructions:
        raise UsageError("nothing to generate: set --episodes and/or --sequences")

    instr_path = f"{args.out_dir}/instructions.json"
    doc = {
        "manifest": _manifest("generate", args.seed, {}, outputs),
        "instructions": [
            {"id": item.instruction.id, "text": item.instruction.text,
             "source": item.instruction.source.value,
             "gold_ouc": item.gold_bundle.ouc.phrase,
             "gold_tool": item.gold_bundle.tool.phrase if item.gold_bundle.tool else None}
            for item in instructions
        ],
    }
    _write_json(doc, instr_path)
    stub_path = f"{args.out_dir}/replay_stub.json"
    _write_json(stub, stub_path)
    print(f"generated {args.episodes} episodes, {args.sequences} sequences "
          f"-> {args.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# extract

def cmd_extract(args) -> int:
    instructions = load_instructions(args.instructions)
    templates = PromptTemplates.load(args.templates) if args.templates \
        else PromptTemplates.default()

    client = None
    client_calls = 0
    if args.strategy == STRATEGY_LLM:
        if args.replay:
            client = ReplayLlmClient.from_file(args.replay)
        elif args.client_config:
            client = HttpLlmClient(LlmClientConfig.load(args.client_config))
        else:
            raise UsageError("strategy llm needs --replay or --client-config")

    bundles: list[KnowledgeBundle] = []
    statuses: list[dict] = []
    failures = 0
    for instr, gold in instructions:
        try:
            if args.strategy == STRATEGY_LLM:
                bundle = extract_bundle(instr, client, templates)
            else:
                bundle = bundle_from_strategy(
                    args.strategy, instr, gt_label=gold.get("ouc"),
                    seed=derive_seed(args.seed, instr.id))
            bundles.append(bundle)
            statuses.append({"id": instr.id, "status": "ok"})
        except LlmError as exc:
            failures += 1
            statuses.append({"id": instr.id, "status": "client_error", "error": str(exc)})
            print(f"[extract] {instr.id}: client error: {exc}", file=sys.stderr)
        except ExtractionFormatError as exc:
            failures += 1
            statuses.append({"id": instr.id, "status": "format_error",
                             "error": str(exc), "raw": exc.raw})
            print(f"[extract] {instr.id}: unparseable response kept for audit",
                  file=sys.stderr)
    if isinstance(client, ReplayLlmClient):
        client_calls = client.calls

    save_cache(bundles, args.out)
    stats = _intrinsic_stats(bundles, instructions)
    manifest = _manifest("extract", args.seed,
                         {"instructions": args.instructions},
                         {"cache": args.out},
                         {"strategy": args.strategy, "client_calls": client_calls,
                          "statuses": statuses, "intrinsic": stats})
    _write_sidecar(args.out, manifest)

    print(f"extracted {len(bundles)}/{len(instructions)} bundles -> {args.out}")
    if stats:
        print(_render_intrinsic_table(stats))
    if failures:
        print(f"{failures} item(s) failed; see per-item status in the manifest",
              file=sys.stderr)
        return 3
    return 0


def _intrinsic_stats(bundles, instructions) -> list[dict]:
    by_id = {b.instruction_id: b for b in bundles}
    stats = []
    for role_name, attr in (("ouc", "ouc"), ("tool", "tool")):
        pairs = []
        for instr, gold in instructions:
            phrase = gold.get(role_name)
            if phrase and instr.id in by_id:
                pairs.append((getattr(by_id[instr.id], attr), phrase))
        if pairs:
            st = eval_extraction(pairs, role=role_name)
            stats.append({"role": st.role, "em": st.em_rate,
                          "overlap": st.overlap_rate, "n": st.n})
    return stats


def _render_intrinsic_table(stats: list[dict]) -> str:
    lines = [f"{'role':<6} {'EM(%)':>8} {'Overlap(%)':>11} {'n':>5}"]
    for st in stats:
        lines.append(f"{st['role']:<6} {st['em']:>8.1f} {st['overlap']:>11.1f} {st['n']:>5d}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    episodes = load_episodes(args.episodes)
    bundles = load_cache(args.cache)
    _warn_missing_bundles(episodes, bundles, args.cache)
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    use_conds, use_desc = _knowledge_flags(args.knowledge)
    cfg.use_conditions = use_conds
    cfg.use_descriptions = use_desc

    resolved = resolve_bundles(episodes, bundles)
    result = train(episodes, resolved, cfg, args.seed)

    manifest = _manifest("train", args.seed,
                         {"episodes": args.episodes, "cache": args.cache,
                          "config": args.config},
                         {"checkpoint": args.out},
                         {"knowledge": args.knowledge,
                          "train_config": {k: getattr(cfg, k)
                                           for k in cfg.__dataclass_fields__}})
    save_checkpoint(result.params, args.out, meta={"manifest": manifest})

    curve_path = args.loss_curve or (args.out + ".loss.csv")
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write("phase,epoch,loss\n")
        for i, loss in enumerate(result.loss_curve):
            fh.write(f"align,{i},{loss!r}\n")
        for i, loss in enumerate(result.frame_head_curve, start=1):
            fh.write(f"frame_head,{i},{loss!r}\n")
    _write_sidecar(curve_path, manifest)
    print(f"trained on {len(episodes)} episodes; "
          f"loss {result.loss_curve[0]:.4f} -> {result.loss_curve[-1]:.4f}; "
          f"checkpoint -> {args.out}")
    return 0


def _estimator_from_checkpoint(path: str, knowledge: str,
                               pooling: str = "pool_first") -> ActiveObjectGrounder:
    params, _meta = load_checkpoint(path)
    use_conds, use_desc = _knowledge_flags(knowledge)
    return ActiveObjectGrounder.from_params(
        params, use_conditions=use_conds, use_descriptions=use_desc, pooling=pooling)


def _warn_missing_bundles(items, bundles: dict, cache_path: str):
    missing = [item.instruction.id for item in items
               if item.instruction.id not in bundles]
    if missing:
        print(f"[warn] {len(missing)} instruction(s) not in {cache_path} "
              f"(falling back to full-instruction grounding), e.g. {missing[:3]}",
              file=sys.stderr)


# ---------------------------------------------------------------------------
# eval-det

def cmd_eval_det(args) -> int:
    episodes = load_episodes(args.episodes)
    bundles = load_cache(args.cache)
    _warn_missing_bundles(episodes, bundles, args.cache)
    est = _estimator_from_checkpoint(args.checkpoint, args.knowledge, args.pooling)
    est.top_k = args.max_dets
    detections = est.predict(episodes, bundles)

    if args.dump_detections:
        flat = [det for per_role in detections.values()
                for ranked in per_role.values() for det in ranked]
        save_detections(flat, args.dump_detections)

    frame_types = {}
    top1 = {}
    for ftype in FrameType:
        dets: dict[str, dict[str, list]] = {r.value: {} for r in Role}
        gts: dict[str, dict[str, list]] = {r.value: {} for r in Role}
        for ep in episodes:
            for frame in ep.typed_frames():
                if frame.frame_type != ftype:
                    continue
                for role in Role:
                    ranked = detections[frame.frame_id][role]
                    dets[role.value][frame.frame_id] = [(d.box, d.score) for d in ranked]
                    gts[role.value][frame.frame_id] = frame.gold_boxes(role)
        report = EvalReport.build(dets, gts, max_dets=args.max_dets)
        frame_types[ftype.value] = report.to_json()["roles"]
        ouc_tops = {img: ranked[:1] for img, ranked in dets[Role.OUC.value].items()}
        top1[ftype.value] = top1_accuracy(ouc_tops, gts[Role.OUC.value])

    doc = {
        "schema": DET_REPORT_SCHEMA,
        "manifest": _manifest("eval-det", None,
                              {"episodes": args.episodes, "cache": args.cache,
                               "checkpoint": args.checkpoint},
                              {"report": args.out or ""},
                              {"knowledge": args.knowledge, "max_dets": args.max_dets,
                               "pooling": args.pooling}),
        "frame_types": frame_types,
        "top1_ouc": top1,
    }
    if args.out:
        _write_json(doc, args.out)
    print(render_det_report(doc))
    return 0


def render_det_report(doc: dict) -> str:
    lines = [f"{'frame':<6} {'role':<6} {'AP':>8} {'AP50':>8} {'AP75':>8} "
             f"{'top1':>6} {'n_gt':>6}"]
    for ftype in ("pre", "pnr", "post"):
        roles = doc["frame_types"].get(ftype, {})
        for role in ("ouc", "tool"):
            if role not in roles:
                continue
            m = roles[role]
            top1 = doc.get("top1_ouc", {}).get(ftype)
            top1_s = f"{top1:6.3f}" if role == "ouc" and top1 is not None else "     -"
            lines.append(f"{ftype:<6} {role:<6} {m['ap']:>8.4f} {m['ap50']:>8.4f} "
                         f"{m['ap75']:>8.4f} {top1_s} {m['n_gt']:>6d}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# eval-ope

def cmd_eval_ope(args) -> int:
    sequences = load_sequences(args.sequences)
    bundles = load_cache(args.cache)
    _warn_missing_bundles(sequences, bundles, args.cache)
    tracker_cfg = TrackerConfig.load(args.tracker_config) if args.tracker_config \
        else TrackerConfig()
    if args.mode == MODE_OPE_DET and not args.checkpoint:
        raise UsageError("mode ope_det requires --checkpoint")
    est = None
    if args.checkpoint:
        est = _estimator_from_checkpoint(args.checkpoint, args.knowledge, args.pooling)

    results = []
    for seq in sequences:
        detector = None
        if est is not None and (args.mode == MODE_OPE_DET or not args.no_refocus):
            detector = est.detector_for(seq, bundles)
        results.append(run_ope(seq, tracker_cfg, detector=detector, mode=args.mode,
                               use_refocus=not args.no_refocus))

    doc = {
        "schema": OPE_REPORT_SCHEMA,
        "manifest": _manifest("eval-ope", None,
                              {"sequences": args.sequences, "cache": args.cache,
                               "checkpoint": args.checkpoint or ""},
                              {"report": args.out or ""},
                              {"mode": args.mode, "knowledge": args.knowledge,
                               "refocus": not args.no_refocus}),
        "mode": args.mode,
        **summarize_runs(results),
    }
    if args.out:
        _write_json(doc, args.out)
    print(render_ope_report(doc))
    return 0


def render_ope_report(doc: dict) -> str:
    mean_ss = doc.get("mean_ss")
    mean_nps = doc.get("mean_nps")
    lines = [
        f"mode={doc['mode']} sequences={doc['n_sequences']} scored={doc['n_scored']} "
        f"refocus_events={doc['total_refocus']} excluded_frames={doc['total_excluded']}",
        f"{'metric':<10} {'mean':>8}",
        f"{'SS':<10} {mean_ss:>8.4f}" if mean_ss is not None else f"{'SS':<10} {'-':>8}",
        f"{'NPS':<10} {mean_nps:>8.4f}" if mean_nps is not None else f"{'NPS':<10} {'-':>8}",
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# report

def cmd_report(args) -> int:
    sections = []
    for path in args.files:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        schema = doc.get("schema")
        if schema == DET_REPORT_SCHEMA:
            body = render_det_report(doc)
        elif schema == OPE_REPORT_SCHEMA:
            body = render_ope_report(doc)
        else:
            raise SchemaError(f"{path}: unknown report schema {schema!r}")
        manifest = json.dumps(doc.get("manifest", {}), sort_keys=True)
        sections.append(f"## {path}\n\n```\n{body}\n```\n\n_manifest: {manifest}_\n")
    text = "\n".join(sections)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        print(text)
    return 0


# ---------------------------------------------------------------------------
# wiring

def build_parser() -> _Parser:
    parser = _Parser(prog="activeground",
                     description="active object grounding pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="emit a synthetic corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--sequences", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scene-config")
    p.add_argument("--ambiguity", action="store_true")
    p.add_argument("--jitter", type=int, default=0)
    p.add_argument("--jitter-window", type=float, default=0.2)
    p.add_argument("--track-frames", type=int, default=12)
    p.add_argument("--no-occlusion", action="store_true")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("extract", help="build the knowledge cache")
    p.add_argument("--instructions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", default=STRATEGY_LLM,
                   choices=(STRATEGY_LLM,) + GROUNDING_STRATEGIES)
    p.add_argument("--replay", help="replay stub JSON (deterministic client)")
    p.add_argument("--client-config", help="HTTP client config JSON")
    p.add_argument("--templates", help="prompt templates JSON")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("train", help="train the alignment model")
    p.add_argument("--episodes", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--config", help="train config key-value file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--knowledge", default="conds", choices=KNOWLEDGE_MODES)
    p.add_argument("--loss-curve", help="loss curve CSV path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval-det", help="detection AP evaluation")
    p.add_argument("--episodes", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--max-dets", type=int, default=100)
    p.add_argument("--knowledge", default="conds", choices=KNOWLEDGE_MODES)
    p.add_argument("--pooling", default=POOL_FIRST, choices=(POOL_FIRST, MIX_FIRST))
    p.add_argument("--dump-detections", help="also write ranked detections (JSONL)")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(fn=cmd_eval_det)

    p = sub.add_parser("eval-ope", help="tracking OPE / OPE-Det evaluation")
    p.add_argument("--sequences", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--mode", default=MODE_OPE, choices=(MODE_OPE, MODE_OPE_DET))
    p.add_argument("--tracker-config")
    p.add_argument("--knowledge", default="conds", choices=KNOWLEDGE_MODES)
    p.add_argument("--pooling", default=POOL_FIRST, choices=(POOL_FIRST, MIX_FIRST))
    p.add_argument("--no-refocus", action="store_true")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(fn=cmd_eval_ope)

    p = sub.add_parser("report", help="render report JSON files as one document")
    p.add_argument("files", nargs="+")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    started = time.monotonic()
    try:
        args = parser.parse_args(argv)
        code = args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except LlmError as exc:
        print(f"client error: {exc}", file=sys.stderr)
        return 3
    except (SchemaError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    print(f"[activeground] done in {time.monotonic() - started:.2f}s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
