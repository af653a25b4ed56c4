"""Command-line entry point: ``wobseg {synth,annotate,train,predict,eval}``.

Exit codes: 0 success, 1 configuration or validation error, 2 I/O error,
3 infeasible training run. Randomness comes only from ``--seed`` (default 0).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import annotation_gen, eval_metrics, hem_sampler, predictor, synthgen
from .augment import PipelineError, load_pipeline
from .raster_store import SlabError, Slide, open_slide, save_slide

log = logging.getLogger("wobseg")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INFEASIBLE = 0, 1, 2, 3


class ConfigFileError(ValueError):
    pass


def _load_json(path) -> object:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def _seed(args, fallback=0) -> int:
    return args.seed if args.seed is not None else fallback


def cmd_synth(args) -> int:
    data = _load_json(args.params)
    if not isinstance(data, dict):
        raise ConfigFileError(f"{args.params}: expected a JSON object")
    data = dict(data)
    n_train = int(data.pop("n_train", args.n_train))
    n_test = int(data.pop("n_test", args.n_test))
    params = synthgen.SynthParams.from_dict(data)
    params = replace(params, seed=_seed(args, params.seed))
    listing = synthgen.generate_dataset(params, n_train, n_test, args.out_dir, overwrite=args.force)
    print(f"wrote {len(listing['slides'])} slides to {args.out_dir}")
    return EXIT_OK


def cmd_annotate(args) -> int:
    slide = open_slide(args.slide)
    cfg = annotation_gen.AnnotationConfig()
    for key in ("sigma_um", "eps", "tau", "min_area_um2"):
        value = getattr(args, key)
        if value is not None:
            setattr(cfg, key, value)
    if args.override and args.override not in slide.masks:
        raise ValueError(f"slide {slide.id} has no {args.override!r} mask to use as override")
    try:
        out = annotation_gen.annotate_slide(slide, cfg, override=args.override)
    except ValueError as exc:
        raise ValueError(f"slide {slide.id}: {exc}") from None
    save_slide(out, args.out, overwrite=args.force)
    if "wob" in slide.masks and slide.masks["wob"][0] is not None:
        score = annotation_gen.iou(out.mask("wob_generated", 0), slide.mask("wob", 0))
        print(f"{slide.id} IoU vs wob: {score:.4f}")
    return EXIT_OK


def _predictor_config(spec) -> predictor.FcnConfig:
    if isinstance(spec, str):
        try:
            return predictor.NAMED_CONFIGS[spec]
        except KeyError:
            raise ConfigFileError(f"unknown predictor config {spec!r}") from None
    return predictor.FcnConfig.from_dict(spec)


def _listing_entries(path, split=None):
    data = _load_json(path)
    root = Path(path).parent
    entries = data["slides"] if isinstance(data, dict) else [{"path": p} for p in data]
    out = []
    for e in entries:
        if split is not None and e.get("split") != split:
            continue
        out.append(root / e["path"])
    return out


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    run = _load_json(cfg_path)
    root = cfg_path.parent
    base = predictor.load_params(args.compound, predictor.BASE_CONFIG) if args.compound else None
    pconf = _predictor_config(run.get("predictor", "head" if base is not None else "base"))
    sampler_fields = dict(run.get("sampler", {}))
    if base is not None:
        sampler_fields["level_mpp"] = 2.0
    scfg = hem_sampler.SamplerConfig.from_dict(sampler_fields)
    pipeline = load_pipeline(root / run["augment"]) if run.get("augment") else None
    seed = _seed(args, int(run.get("seed", 0)))
    paths = _listing_entries(root / run["dataset"], run.get("split", "train"))
    if not paths:
        raise ValueError("dataset has no training slides")
    mask = run.get("mask", "wob")
    views = [
        hem_sampler.make_view(open_slide(p), scfg.level_mpp, mask, base, scfg.restrict_to_tissue) for p in paths
    ]
    init = predictor.load_params(args.init_from, pconf) if args.init_from else None
    if args.clock:
        scfg.clock = args.clock

    def report(stats):
        log.info("cycle %d k=%d iterations=%d loss=%.4f", stats.cycle, stats.k_n, stats.iterations, stats.loss_mean)

    result = hem_sampler.run_protocol(views, scfg, pipeline, pconf, np.random.default_rng(seed), init, report)
    out = root / run.get("output", "params.wobp")
    predictor.save_params(result.params, out)
    hem_sampler.write_stats(result.stats, root / run.get("stats", "stats.csv"))
    print(f"trained {result.stats[-1].iterations if result.stats else 0} iterations -> {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    slide = open_slide(args.slide)
    if args.compound:
        base = predictor.load_params(args.compound, predictor.BASE_CONFIG)
        head = predictor.load_params(args.params)
        probs = predictor.compound_predict(base, head, slide, args.tile, args.threads)
        li = slide.level_index(2.0)
    else:
        params = predictor.load_params(args.params)
        try:
            li = slide.level_index(args.level_mpp)
        except KeyError as exc:
            raise ValueError(str(exc)) from None
        probs = predictor.predict_slide(params, slide, args.level_mpp, args.tile, threads=args.threads)
    masks = dict(slide.masks)
    plane = [None] * len(slide.levels)
    plane[li] = eval_metrics.quantize(probs)
    masks[args.name] = plane
    out = Slide(slide.id, slide.levels, dict(slide.channel_roles), masks, slide.prob_masks | {args.name})
    save_slide(out, args.out, overwrite=args.force)
    print(f"{slide.id}: {args.name} at {slide.levels[li].mpp} mpp -> {args.out}")
    return EXIT_OK


def _pred_level(slide: Slide, name: str) -> int:
    planes = slide.masks.get(name) or []
    for li, plane in enumerate(planes):
        if plane is not None:
            return li
    raise ValueError(f"slide {slide.id} has no {name!r} prediction plane")


def cmd_eval(args) -> int:
    def pairs():
        for path in _listing_entries(args.listing, args.split):
            slide = open_slide(path)
            li = _pred_level(slide, args.pred)
            try:
                labels = slide.mask(args.truth, li)
            except KeyError:
                raise ValueError(f"slide {slide.id}: missing ground truth {args.truth!r}") from None
            domain = slide.mask("tissue", li) if args.domain == "tissue" else None
            yield slide.id, slide.mask(args.pred, li), labels, domain

    curve, per_slide = eval_metrics.evaluate(pairs(), args.threshold)
    summary = eval_metrics.write_report(args.out, curve, per_slide, {"domain": args.domain, "threshold": args.threshold})
    print(f"auc {summary['auc']:.4f} max_f1 {summary['max_f1']:.4f} at {summary['max_f1_threshold']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--threads", type=int, default=1, help="tile prediction threads")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = argparse.ArgumentParser(prog="wobseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("params", help="JSON file of synthesis parameters")
    p.add_argument("out_dir")
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-test", type=int, default=4)
    p.add_argument("--force", action="store_true", help="overwrite existing slides")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("annotate", parents=[common], help="derive WOB masks from IF channels")
    p.add_argument("slide")
    p.add_argument("--out", required=True, help="slab directory to write")
    p.add_argument("--sigma-um", dest="sigma_um", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--min-area-um2", dest="min_area_um2", type=float)
    p.add_argument("--override", help="name of a mask to OR into the result")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("train", parents=[common], help="train with hard example mining")
    p.add_argument("config", help="training run JSON")
    p.add_argument("--init-from", help="parameters to start from (finetuning)")
    p.add_argument("--compound", metavar="BASE_PARAMS", help="train a head on base predictions")
    p.add_argument("--clock", choices=["simulated", "real"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="write a probability plane")
    p.add_argument("params")
    p.add_argument("slide")
    p.add_argument("--out", required=True)
    p.add_argument("--compound", metavar="BASE_PARAMS")
    p.add_argument("--level-mpp", type=float, default=1.0)
    p.add_argument("--tile", type=int, default=256)
    p.add_argument("--name", default="prob")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="PR curve and per-slide metrics")
    p.add_argument("listing", help="JSON listing of predicted slides")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--domain", choices=["all", "tissue"], default="all")
    p.add_argument("--split")
    p.add_argument("--pred", default="prob")
    p.add_argument("--truth", default="wob")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except hem_sampler.InfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError, PipelineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
