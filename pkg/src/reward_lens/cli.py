"""Command-line entry point: ``reward-lens <command> ...``.

Exit codes: 0 success, 2 bad arguments, 3 unreadable or malformed data,
4 numeric degeneracy (always for hard failures; for soft warnings only with
``--strict``).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import attribution, comparator, divergence, geometry, lens, patching, probes, sae
from .engine import (
    TransformerConfig,
    build_length_model,
    build_planted_model,
    build_seeded_model,
    config_hash,
    full_vocab_size,
    load_model,
    save_model,
)
from .errors import CorpusTooSmallError, DataFormatError, NumericDegeneracyError, RewardLensError
from .io import parallel_map, read_pairs, validate_report, write_csv, write_json, dumps
from .viz import bar_payload, emit_svg, heatmap_payload, trajectory_payload

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class Run:
    """Collects one command's result, warnings, plots and table, then writes them."""

    def __init__(self, args, command: str, model=None):
        self.args, self.command, self.model = args, command, model
        self.warnings: list[str] = []
        self.plots: list[tuple[dict, str, str]] = []
        self.table: Optional[tuple[list[str], list[list]]] = None
        self.settings: dict = {}

    def warn(self, msg: str) -> None:
        self.warnings.append(msg)

    def plot(self, payload: dict, kind: str, filename: str) -> None:
        self.plots.append((payload, kind, filename))

    def finish(self, result: dict) -> int:
        summary = {
            "command": self.command,
            "model": None if self.model is None else self.model.name,
            "config_hash": None if self.model is None else config_hash(self.model),
            "seed": self.args.seed,
            "settings": self.settings,
            "warnings": list(self.warnings),
            "result": result,
        }
        doc = json.loads(dumps(summary))
        validate_report(doc, self.command)
        if self.args.out:
            write_json(self.args.out, doc)
        else:
            sys.stdout.write(dumps(doc).decode("utf-8"))
        if self.args.plot:
            plot_dir = Path(self.args.plot)
            plot_dir.mkdir(parents=True, exist_ok=True)
            for payload, kind, name in self.plots:
                emit_svg(payload, kind, plot_dir / name)
        if self.args.table and self.table is not None:
            write_csv(self.args.table, *self.table)
        for w in self.warnings:
            print(f"warning: {w}", file=sys.stderr)
        if self.args.strict and self.warnings:
            return EXIT_NUMERIC
        return EXIT_OK


def _load(args):
    if not args.model:
        raise UsageError("--model is required for this command")
    return load_model(args.model)


def _floats(text: str, name: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{name} must be a comma-separated list of numbers") from None


def _names(text: Optional[str]) -> Optional[list[str]]:
    return None if text is None else [x.strip() for x in text.split(",") if x.strip()]


# -- commands --------------------------------------------------------------

def cmd_score(args) -> int:
    model = _load(args)
    r = model.score(args.prompt, args.response)
    print(repr(r))
    if args.out:
        run = Run(args, "score", model)
        run.settings = {"prompt": args.prompt, "response": args.response}
        args.plot = None
        return run.finish({"reward": r})
    return EXIT_OK


def cmd_lens(args) -> int:
    model = _load(args)
    pairs = read_pairs(args.pairs)
    run = Run(args, "lens", model)
    results = parallel_map(lambda p: lens.trace(model, p), pairs)
    entries, rows = [], []
    for i, (p, r) in enumerate(zip(pairs, results)):
        d = r.to_dict()
        entries.append({"index": i, "dimension": p.dimension, **d})
        if r.crystallisation_depth is None:
            run.warn(f"pair {i}: final differential below eps0; crystallisation depth undefined")
        run.plot(trajectory_payload(d, f"pair {i}"), "trajectory", f"lens_pair{i:03d}.svg")
        rows.append([i, r.reward_preferred, r.reward_dispreferred, float(r.differential[-1]),
                     r.crystallisation_layer, r.crystallisation_depth])
    run.table = (["pair", "reward_preferred", "reward_dispreferred", "final_lens_differential",
                  "crystallisation_layer", "crystallisation_depth"], rows)
    return run.finish({"pairs": entries, "crystallisation_depths": [e["crystallisation_depth"] for e in entries]})


def cmd_attribute(args) -> int:
    model = _load(args)
    pairs = read_pairs(args.pairs)
    run = Run(args, "attribute", model)
    run.settings = {"top_k": args.top_k}
    results = parallel_map(lambda p: attribution.attribute(model, p), pairs)
    entries, rows = [], []
    for i, r in enumerate(results):
        entries.append({"index": i, "dimension": pairs[i].dimension, **r.to_dict(),
                        "top_k": r.top_k(min(args.top_k, len(r.component_names)))})
        run.plot(bar_payload(r.component_names, r.differential_contributions, args.top_k,
                             "differential contribution", f"pair {i}"), "topk-bar", f"attribution_pair{i:03d}.svg")
        run.plot(heatmap_payload(r.heatmap(), ["attn", "mlp"], ["embed"] + [f"L{l}" for l in range(r.n_layers)],
                                 f"pair {i}"), "heatmap", f"attribution_heatmap_pair{i:03d}.svg")
        for n, a, b, c in zip(r.component_names, r.contributions_preferred, r.contributions_dispreferred,
                              r.differential_contributions):
            rows.append([i, n, float(a), float(b), float(c)])
    run.table = (["pair", "component", "preferred", "dispreferred", "differential"], rows)
    return run.finish({"pairs": entries})


def _faithfulness(run, i, model, pair, result):
    try:
        rho, p = patching.faithfulness(attribution.attribute(model, pair), result)
        return {"rho": rho, "p_value": p}
    except NumericDegeneracyError as exc:
        run.warn(f"pair {i}: faithfulness undefined ({exc})")
        return None


def cmd_patch(args) -> int:
    model = _load(args)
    pairs = read_pairs(args.pairs)
    run = Run(args, "patch", model)
    run.settings = {"mode": args.mode, "splice": args.splice}
    results = parallel_map(lambda p: patching.patch_all_components(model, p, args.mode, args.splice), pairs)
    entries, rows = [], []
    for i, (p, r) in enumerate(zip(pairs, results)):
        if r.normalized_effects is None:
            run.warn(f"pair {i}: original differential below eps0; normalised effects undefined")
        faith = _faithfulness(run, i, model, p, r) if len(r.component_names) >= 4 else None
        entries.append({"index": i, "dimension": p.dimension, **r.to_dict(), "faithfulness": faith})
        run.plot(bar_payload(r.component_names, r.patch_effects, 10, f"{args.mode} patch effect", f"pair {i}"),
                 "topk-bar", f"patch_pair{i:03d}.svg")
        norm = r.normalized_effects if r.normalized_effects is not None else [None] * len(r.patch_effects)
        for n, e, ne in zip(r.component_names, r.patch_effects, norm):
            rows.append([i, n, float(e), None if ne is None else float(ne)])
    run.table = (["pair", "component", "effect", "normalized_effect"], rows)
    return run.finish({"pairs": entries})


def cmd_divergence_patch(args) -> int:
    model = _load(args)
    pairs = read_pairs(args.pairs)
    corpus_pairs = read_pairs(args.corpus) if args.corpus else pairs
    corpus = [(p.prompt, r) for p in corpus_pairs for r in (p.preferred, p.dispreferred)]
    run = Run(args, "divergence-patch", model)
    run.settings = {"mode": args.mode, "splice": args.splice, "threshold": args.threshold,
                    "constrained": args.constrained, "corpus_size": len(corpus)}
    est = divergence.fit_distribution(model, corpus)
    if args.save_estimator:
        est.save(args.save_estimator)
    fn = divergence.constrained_patch if args.constrained else divergence.patch_with_divergence_check
    results = parallel_map(lambda p: fn(model, p, est, args.mode, args.threshold, args.splice), pairs)
    entries, rows = [], []
    for i, r in enumerate(results):
        if r.flagged_low_reliability:
            run.warn(f"pair {i}: reliability {r.reliability_score:.3f} below {divergence.LOW_RELIABILITY}")
        if any(d.absolute_cutoff for d in r.divergence_info):
            run.warn(f"pair {i}: degenerate original differential; absolute harmless cutoff used")
        entries.append({"index": i, "dimension": pairs[i].dimension, **r.to_dict()})
        run.plot(bar_payload(r.component_names, [d.divergence_score for d in r.divergence_info], 10,
                             "divergence score (sigma)", f"pair {i}"), "topk-bar", f"divergence_pair{i:03d}.svg")
        for d, e in zip(r.divergence_info, r.patch_effects):
            rows.append([i, d.component, d.divergence_score, d.divergence_type, float(e)])
    run.table = (["pair", "component", "divergence_score", "divergence_type", "effect"], rows)
    return run.finish({"pairs": entries})


def cmd_hack(args) -> int:
    model = _load(args)
    tests = probes.load_probes(args.probes, "hacking")
    run = Run(args, "hack", model)
    report = probes.hacking_scan(model, tests)
    for r in report.results:
        if r.flag:
            run.warn(f"dimension {r.dimension!r}: effect size {r.flag}")
    run.plot(bar_payload(report.dimensions, [r.mean_delta for r in report.results], len(report.results),
                         "mean reward delta (biased - neutral)"), "topk-bar", "hacking.svg")
    run.table = (["dimension", "pairs_tested", "mean_delta", "std_delta", "effect_size", "verdict", "flag"],
                 [[r.dimension, r.pairs_tested, r.mean_delta, r.std_delta, r.effect_size, r.verdict, r.flag]
                  for r in report.results])
    return run.finish(report.to_dict())


def cmd_cascade(args) -> int:
    model = _load(args)
    tests = probes.load_probes(args.probes, "cascade")
    run = Run(args, "cascade", model)
    run.settings = {"corr_threshold": args.threshold}
    report = probes.cascade_detect(model, tests, args.threshold)
    if report.degenerate_pairs:
        run.warn(f"{len(report.degenerate_pairs)} degenerate correlations")
    if report.truncated_to is not None:
        run.warn(f"unequal pair counts; correlations truncated to {report.truncated_to} pairs")
    run.plot(heatmap_payload(report.correlation_matrix, report.dimensions_tested, report.dimensions_tested,
                             "misalignment correlations"), "heatmap", "cascade.svg")
    run.table = (["dimension", "score"], [[d, s] for d, s in report.per_dimension_scores.items()])
    return run.finish(report.to_dict())


def _read_probe_outcomes(path) -> list[probes.ProbeOutcome]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                dims = rec["dimensions"]
                if isinstance(dims, str) or not all(isinstance(d, str) for d in dims):
                    raise TypeError("dimensions must be a list of strings")
                delta = rec["delta"]
                if not isinstance(delta, (int, float, dict)):
                    raise TypeError("delta must be a number or an object")
                out.append(probes.ProbeOutcome(str(rec["probe"]), tuple(dims), delta))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataFormatError(f"{path}:{n}: bad probe result ({exc})") from None
    return out


def cmd_distortion(args) -> int:
    results = _read_probe_outcomes(args.results)
    dims = _names(args.dimensions)
    if dims is None:
        dims = list(dict.fromkeys(d for r in results for d in r.dimensions))
    rng = tuple(_floats(args.delta_range, "--delta-range")) if args.delta_range else None
    if rng is not None and len(rng) != 2:
        raise UsageError("--delta-range takes two numbers: lo,hi")
    run = Run(args, "distortion")
    run.settings = {"dimensions": dims, "tools": args.tools, "delta_range": rng}
    report = probes.distortion_index(results, dims, rng)
    if report.flat_normalisation:
        run.warn("all probe deltas equal; coverage set to 0.5")
    if args.tools is not None:
        report = probes.agentic_amplification(report, args.tools)
    run.plot(bar_payload(dims, [report.per_dimension_distortion[d] for d in dims], len(dims), "distortion"),
             "topk-bar", "distortion.svg")
    run.table = (["dimension", "effective_coverage", "distortion"],
                 [[d, report.effective_coverage[d], report.per_dimension_distortion[d]] for d in dims])
    return run.finish(report.to_dict())


def cmd_conflict(args) -> int:
    model = _load(args)
    run = Run(args, "conflict", model)
    if args.terms:
        grouped: dict = {}
        for p in read_pairs(args.terms):
            if p.dimension is None:
                raise DataFormatError(f"{args.terms}: every term pair needs a 'dimension'")
            grouped.setdefault(p.dimension, []).append(p)
        run.settings = {"source": "terms", "layer": args.layer}
        report = geometry.analyze_conflicts(geometry.learn_term_directions(model, grouped, args.layer))
    else:
        run.settings = {"source": "objectives"}
        report = geometry.analyze_conflicts(model, _names(args.names))
    run.plot(heatmap_payload(report.similarity_matrix, report.term_names, report.term_names,
                             "term cosine similarity"), "heatmap", "conflict.svg")
    run.table = (["term_a", "term_b", "cosine", "relationship"],
                 [[a["term_a"], a["term_b"], a["cosine"], a["relationship"]] for a in report.pairwise_analysis])
    return run.finish(report.to_dict())


def cmd_concepts(args) -> int:
    model = _load(args)
    run = Run(args, "concepts", model)
    hackable = _names(args.hackable) if args.hackable is not None else sorted(geometry.DEFAULT_HACKABLE)
    run.settings = {"layer": args.layer, "alignment_threshold": args.threshold, "hackable": hackable}
    infos = geometry.extract_concepts(model, geometry.load_concepts(args.concepts), args.layer,
                                      args.threshold, hackable)
    run.plot(bar_payload([c.name for c in infos], [c.reward_alignment for c in infos], len(infos),
                         "reward alignment"), "topk-bar", "concepts.svg")
    run.table = (["concept", "reward_alignment", "separability", "is_reward_aligned", "hacking_risk"],
                 [[c.name, c.reward_alignment, c.separability, c.is_reward_aligned, c.hacking_risk] for c in infos])
    return run.finish({"concepts": [c.to_dict() for c in infos]})


def cmd_dose_response(args) -> int:
    model = _load(args)
    concepts = geometry.load_concepts(args.concepts)
    if args.concept not in concepts:
        raise DataFormatError(f"concept {args.concept!r} not found; available: {sorted(concepts)}")
    alphas = _floats(args.alphas, "--alphas") if args.alphas else list(geometry.DEFAULT_ALPHAS)
    run = Run(args, "dose-response", model)
    run.settings = {"concept": args.concept, "layer": args.layer, "alphas": alphas,
                    "prompt": args.prompt, "response": args.response}
    info = geometry.extract_concepts(model, {args.concept: concepts[args.concept]}, args.layer)[0]
    dr = geometry.dose_response(model, args.prompt, args.response, info, args.layer, alphas)
    d = dr.to_dict()
    run.plot({**d, "slope": dr.causal_slope, "title": args.concept}, "dose-response", "dose_response.svg")
    run.table = (["alpha", "reward", "delta", "lens_delta"],
                 [[a, r, x, y] for a, r, x, y in zip(d["alphas"], d["rewards"], d["deltas"], d["lens_deltas"])])
    return run.finish({**d, "reward_alignment": info.reward_alignment})


def cmd_sae_collect(args) -> int:
    model = _load(args)
    pairs = read_pairs(args.pairs)
    corpus = [(p.prompt, r) for p in pairs for r in (p.preferred, p.dispreferred)]
    run = Run(args, "sae-collect", model)
    run.settings = {"layer": args.layer, "max_rows": args.max_rows}
    paths = sae.collect_activations(model, corpus, args.layer, args.out_dir, args.max_rows)
    shards = [{"file": p.name, "count": sae.read_shard(p).count} for p in paths]
    return run.finish({"layer": args.layer, "d": model.d_model, "rows": len(corpus), "shards": shards})


def _shard_paths(items) -> list[Path]:
    paths = []
    for item in items:
        p = Path(item)
        paths.extend(sorted(p.glob("*.bin")) if p.is_dir() else [p])
    if not paths:
        raise DataFormatError("no shard files found")
    return paths


def cmd_sae_train(args) -> int:
    X = sae.load_rows(_shard_paths(args.shards))
    run = Run(args, "sae-train")
    run.settings = {"features": args.features, "k": args.k, "epochs": args.epochs, "lr": args.lr,
                    "batch_size": args.batch_size}
    state = sae.init_state(X.shape[1], args.features, args.k, seed=args.seed)
    state, trace = sae.train(state, X, args.epochs, args.lr, args.batch_size, seed=args.seed)
    state.save(args.state_out)
    f, x_hat = sae.sae_forward(state, X)
    mse = float(np.mean(np.sum((X - x_hat) ** 2, axis=1)))
    return run.finish({"d": state.d, "n_features": state.n_features, "k": state.k, "steps": state.step,
                       "rows": int(X.shape[0]), "loss_trace": trace, "final_loss": trace[-1],
                       "reconstruction_mse": mse})


def cmd_sae_analyze(args) -> int:
    model = _load(args)
    state = sae.TopKSAEState.load(args.state)
    X = sae.load_rows(_shard_paths(args.shards))
    run = Run(args, "sae-analyze", model)
    run.settings = {"top_activations": args.top_activations, "top_features": args.top_features}
    feats = sae.analyze_features(state, X, model.reward_direction, args.top_activations)
    top = sae.top_reward_features(feats, min(args.top_features, len(feats)))
    run.plot(bar_payload([f"f{fi.index}" for fi in feats], [fi.reward_alignment for fi in feats],
                         min(args.top_features, len(feats)), "reward alignment"), "topk-bar", "sae_features.svg")
    run.table = (["feature", "reward_alignment", "mean_activation", "activation_frequency"],
                 [[fi.index, fi.reward_alignment, fi.mean_activation, fi.activation_frequency] for fi in feats])
    return run.finish({"features": [fi.to_dict() for fi in feats],
                       "top_reward_features": [fi.index for fi in top]})


def cmd_compare(args) -> int:
    models = [load_model(m) for m in args.models]
    if len(models) < 2:
        raise UsageError("compare needs at least two --models")
    pairs = read_pairs(args.pairs)
    run = Run(args, "compare")
    run.settings = {"models": [m.name for m in models], "config_hashes": [config_hash(m) for m in models]}
    entries = []
    for i, p in enumerate(pairs):
        r = comparator.compare(models, p)
        for n in r.degenerate_models:
            run.warn(f"pair {i}: model {n!r} has a flat differential curve")
        entries.append({"index": i, **r.to_dict()})
        run.plot({"grid": r.grid.tolist(), "curves": r.curves.tolist(), "names": r.model_names,
                  "title": f"pair {i}"}, "overlay", f"compare_pair{i:03d}.svg")
    return run.finish({"pairs": entries})


def cmd_build_toy(args) -> int:
    vocab_size = args.vocab_size
    if vocab_size is None:
        vocab_size = args.d_model if args.kind == "planted" else full_vocab_size()
    cfg = TransformerConfig(n_layers=args.layers, d_model=args.d_model, n_heads=args.heads,
                            vocab_size=vocab_size, max_seq=args.max_seq, head_kind=args.head_kind,
                            n_objectives=args.objectives, norm=args.norm, act=args.act)
    if args.kind == "seeded":
        model = build_seeded_model(cfg, seed=args.seed, init_scale=args.init_scale)
    elif args.kind == "planted":
        model = build_planted_model(cfg, layer=args.plant_layer, trigger_token=args.trigger, gain=args.gain,
                                    component=args.component, seed=args.seed)
    else:
        model = build_length_model(cfg, gain=args.gain, seed=args.seed)
    save_model(model, args.out_dir)
    run = Run(args, "build-toy", model)
    run.settings = {"kind": args.kind}
    result = {"name": model.name, "config": model.config.to_dict()}
    if model.plant is not None:
        result["plant"] = {"layer": model.plant.layer, "component": model.plant.component,
                           "trigger_token": model.plant.trigger_token, "gain": model.plant.gain,
                           "expected_shift": model.plant.expected_shift(model.reward_direction)}
    return run.finish(result)


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", help="model directory")
    common.add_argument("--out", help="report JSON path (stdout when omitted)")
    common.add_argument("--plot", metavar="DIR", help="write SVG figures into DIR")
    common.add_argument("--table", metavar="CSV", help="also write a CSV table")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--strict", action="store_true", help="exit 4 when any numeric warning is raised")

    parser = argparse.ArgumentParser(prog="reward-lens", description="Reward-model interpretability toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, fn: Callable, help: str):
        p = sub.add_parser(name, parents=[common], help=help, description=help)
        p.set_defaults(handler=fn)
        return p

    p = add("score", cmd_score, "score one prompt/response")
    p.add_argument("--prompt", required=True)
    p.add_argument("--response", required=True)

    add("lens", cmd_lens, "reward-lens trajectories and crystallisation depth").add_argument("--pairs", required=True)

    p = add("attribute", cmd_attribute, "per-component reward attribution")
    p.add_argument("--pairs", required=True)
    p.add_argument("--top-k", type=int, default=10)

    def patch_args(p):
        p.add_argument("--pairs", required=True)
        p.add_argument("--mode", choices=patching.MODES, default="noising")
        p.add_argument("--splice", choices=patching.SPLICES, default="shared_prefix")

    patch_args(add("patch", cmd_patch, "activation patching over every sublayer"))
    p = add("divergence-patch", cmd_divergence_patch, "patching with Mahalanobis divergence screening")
    patch_args(p)
    p.add_argument("--corpus", help="pair file whose responses fit the activation distribution (default: --pairs)")
    p.add_argument("--threshold", type=float, default=divergence.DEFAULT_THRESHOLD)
    p.add_argument("--constrained", action="store_true", help="shrink divergent activations onto the threshold")
    p.add_argument("--save-estimator", metavar="PATH")

    add("hack", cmd_hack, "reward-hacking probe scan").add_argument("--probes", help="probe JSONL (default: shipped set)")
    p = add("cascade", cmd_cascade, "misalignment cascade detection")
    p.add_argument("--probes", help="probe JSONL (default: shipped set)")
    p.add_argument("--threshold", type=float, default=probes.CORR_THRESHOLD)

    p = add("distortion", cmd_distortion, "distortion index of an evaluation probe set")
    p.add_argument("--results", required=True, help="JSONL of {probe, dimensions, delta}")
    p.add_argument("--dimensions", help="comma-separated quality dimensions (default: all tagged)")
    p.add_argument("--tools", type=int, help="tool count for agentic amplification")
    p.add_argument("--delta-range", help="fixed normalisation bounds lo,hi")

    p = add("conflict", cmd_conflict, "reward-term conflict geometry")
    p.add_argument("--terms", help="pair JSONL grouped by 'dimension' (default: the model's objective rows)")
    p.add_argument("--names", help="comma-separated objective names")
    p.add_argument("--layer", type=int)

    p = add("concepts", cmd_concepts, "concept vectors and their reward alignment")
    p.add_argument("--concepts", help="concept JSONL (default: shipped set)")
    p.add_argument("--layer", type=int)
    p.add_argument("--threshold", type=float, default=geometry.ALIGNMENT_THRESHOLD)
    p.add_argument("--hackable", help="comma-separated hackable concept names")

    p = add("dose-response", cmd_dose_response, "reward response to concept-vector interventions")
    p.add_argument("--concept", required=True)
    p.add_argument("--concepts", help="concept JSONL (default: shipped set)")
    p.add_argument("--prompt", required=True)
    p.add_argument("--response", required=True)
    p.add_argument("--layer", type=int)
    p.add_argument("--alphas", help="comma-separated intervention strengths")

    p = add("sae-collect", cmd_sae_collect, "write final-token activations to shards")
    p.add_argument("--pairs", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--max-rows", type=int, default=4096)

    p = add("sae-train", cmd_sae_train, "train a TopK sparse autoencoder")
    p.add_argument("--shards", nargs="+", required=True, help="shard files or directories")
    p.add_argument("--features", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--state-out", required=True)

    p = add("sae-analyze", cmd_sae_analyze, "reward alignment of SAE features")
    p.add_argument("--state", required=True)
    p.add_argument("--shards", nargs="+", required=True)
    p.add_argument("--top-activations", type=int, default=10)
    p.add_argument("--top-features", type=int, default=10)

    p = add("compare", cmd_compare, "compare lens trajectories across models")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--pairs", required=True)

    p = add("build-toy", cmd_build_toy, "build a deterministic toy model directory")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--kind", choices=("seeded", "planted", "length"), default="seeded")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--max-seq", type=int, default=64)
    p.add_argument("--head-kind", choices=("scalar", "multi_objective"), default="scalar")
    p.add_argument("--objectives", type=int, default=1)
    p.add_argument("--norm", choices=("layernorm", "none"), default="layernorm")
    p.add_argument("--act", choices=("gelu", "relu"), default="gelu")
    p.add_argument("--init-scale", type=float, default=1.0)
    p.add_argument("--trigger", default="a")
    p.add_argument("--plant-layer", type=int, default=0)
    p.add_argument("--component", choices=("attn", "mlp"), default="mlp")
    p.add_argument("--gain", type=float, default=5.0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"reward-lens: error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (DataFormatError, CorpusTooSmallError, OSError, UnicodeDecodeError) as exc:
        print(f"reward-lens: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericDegeneracyError as exc:
        print(f"reward-lens: numeric degeneracy: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RewardLensError, ValueError, KeyError) as exc:
        print(f"reward-lens: error: {exc}", file=sys.stderr)
        return EXIT_ARGS


def run() -> None:
    sys.exit(main())
