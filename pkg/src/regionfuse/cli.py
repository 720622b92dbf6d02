"""Command-line surface.

Subcommands map onto the pipeline stages: ``segment`` (stage 1), ``layout``
(stage 2), ``generate`` (all three), plus ``probe`` (raw attention dumps),
``eval`` (mask IoU and toy alignment scores), ``ablate`` (region-count
sweep), and ``fixtures`` (synthetic planted attention maps).

Every run logs its resolved parameter set to stderr. Failures print a single
machine-parsable line ``error: code=<Name> detail=<message>`` and exit 1
(domain errors) or 2 (usage errors).
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import fixtures as fixture_lib
from .engine import Conditioning, DiffusionEngine, UNetConfig
from .errors import RegionFuseError, UsageError
from .formats import (from_uint8, read_pgm, read_ppm, to_uint8, write_pgm,
                      write_ppm, write_tensor)
from .pipeline import (ablate_regions, generate_multi, layout_pass, make_engine,
                       mask_iou, toy_image_score, toy_text_score)
from .probe import AttentionProbe
from .promptcfg import (build_request, load_prompt_config, resolved_params_line,
                        specs_from_config)
from .seeding import derive_seed
from .segmentation import segment_reference
from .text import encode_tokens, tokenize

log = logging.getLogger("regionfuse")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regionfuse",
        description="Region-level adapter fusion on a toy latent-diffusion engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="stage 1: crop a reference into region parts")
    p.add_argument("--config", required=True)
    p.add_argument("--ref", action="append", required=True,
                   help="reference PPM, once per character")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("layout", help="stage 2: write per-region layout maps")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("generate", help="full three-stage generation")
    p.add_argument("--config", required=True)
    p.add_argument("--ref", action="append", required=True)
    p.add_argument("--out", required=True, help="output PPM path")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--masks-dir", default=None, help="also write fusion masks here")

    p = sub.add_parser("probe", help="dump raw attention records of a text-only run")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("eval", help="mask IoU / toy alignment scores between files")
    p.add_argument("--mask-a")
    p.add_argument("--mask-b")
    p.add_argument("--image", help="generated PPM to score")
    p.add_argument("--ref", help="reference PPM for the toy image score")
    p.add_argument("--config", help="config whose prompt drives the toy text score")

    p = sub.add_parser("ablate", help="re-run generation with 1/2/3/4 regions")
    p.add_argument("--config", required=True)
    p.add_argument("--ref", action="append", required=True)
    p.add_argument("--regions", required=True, help="comma list, subset of 1,2,3,4")
    p.add_argument("--out-dir", default=None, help="write per-count images here")

    p = sub.add_parser("fixtures", help="emit synthetic planted attention fixtures")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--size", type=int, default=64, help="square map side")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _load_references(paths):
    return [from_uint8(read_ppm(p)) for p in paths]


def _request_from_args(args, seed=None):
    config = load_prompt_config(args.config)
    request = build_request(config, _load_references(args.ref), seed=seed)
    log.info(resolved_params_line(request))
    return request


def _cmd_segment(args) -> int:
    request = _request_from_args(args)
    os.makedirs(args.out_dir, exist_ok=True)
    engine = make_engine(request)
    for spec, ref in zip(request.specs, request.references):
        j = spec.character_index
        crops, boxes = segment_reference(
            ref, spec, engine, patch_factor=request.patch_factor,
            gamma1=request.gamma1, steps=request.steps,
            seed=derive_seed(request.seed, "segment"))
        manifest = []
        for crop in crops:
            box = boxes[crop.label]
            write_pgm(os.path.join(args.out_dir, f"char{j}_{crop.label}_mask.pgm"),
                      to_uint8(box.to_mask(request.latent_size, request.latent_size)))
            write_ppm(os.path.join(args.out_dir, f"char{j}_{crop.label}_crop.ppm"),
                      to_uint8(crop.pixels))
            manifest.append(f"{crop.label} {box.x1} {box.x2} {box.y1} {box.y2}")
        path = os.path.join(args.out_dir, f"boxes_char{j}.txt")
        with open(path, "w", encoding="ascii") as f:
            f.write("\n".join(manifest) + "\n")
        log.info("segment: wrote %d regions for character %d", len(crops), j)
    return 0


def _log_config_params(config) -> None:
    p = config.params
    log.info("params: steps=%d cfg_scale=%g adapter_scale=%g gamma1=%g gamma2=%g "
             "mask_mode=%s seed=%d latent=%d patch_factor=%d engine_seed=%d "
             "characters=%d", p["steps"], p["cfg_scale"], p["adapter_scale"],
             p["gamma1"], p["gamma2"], p["mask_mode"], p["seed"], p["latent"],
             p["patch_factor"], p["engine_seed"], len(config.characters))


def _cmd_layout(args) -> int:
    # layout maps depend only on prompts, never on reference images
    config = load_prompt_config(args.config)
    _log_config_params(config)
    p = config.params
    specs = specs_from_config(config)
    engine = DiffusionEngine(UNetConfig(height=p["latent"], width=p["latent"],
                                        seed=p["engine_seed"]))
    result = layout_pass(specs, engine, steps=p["steps"],
                         cfg_scale=p["cfg_scale"], seed=p["seed"])
    os.makedirs(args.out_dir, exist_ok=True)
    for (j, label), m in sorted(result.maps.items()):
        write_tensor(os.path.join(args.out_dir, f"layout_char{j}_{label}.catn"), m.values)
        write_pgm(os.path.join(args.out_dir, f"layout_char{j}_{label}.pgm"),
                  to_uint8(m.values))
    log.info("layout: wrote %d region maps", len(result.maps))
    return 0


def _cmd_generate(args) -> int:
    request = _request_from_args(args, seed=args.seed)
    artifacts = generate_multi(request)
    write_ppm(args.out, to_uint8(artifacts.image))
    if args.masks_dir:
        os.makedirs(args.masks_dir, exist_ok=True)
        for (j, label), mask in sorted(artifacts.masks.items()):
            write_pgm(os.path.join(args.masks_dir, f"mask_char{j}_{label}.pgm"),
                      to_uint8(mask.values))
    log.info("generate: %s (stage1 %.3fs, stage2 %.3fs, stage3 %.3fs)",
             args.out, artifacts.timing["stage1"], artifacts.timing["stage2"],
             artifacts.timing["stage3"])
    return 0


def _cmd_probe(args) -> int:
    # probing needs no references; run a text-only pass straight off the config
    config = load_prompt_config(args.config)
    _log_config_params(config)
    p = config.params
    engine = DiffusionEngine(UNetConfig(height=p["latent"], width=p["latent"],
                                        seed=p["engine_seed"]))
    probe = AttentionProbe()
    ctx = Conditioning(text=encode_tokens(tokenize(config.prompt), seed=p["engine_seed"]),
                       cfg_scale=p["cfg_scale"])
    engine.sample(ctx, steps=p["steps"], seed=derive_seed("layout", p["seed"], config.prompt),
                  probe=probe)
    os.makedirs(args.out_dir, exist_ok=True)
    index = []
    for rec in probe.records:
        name = f"attn_t{rec.timestep:03d}_layer{rec.layer}.catn"
        write_tensor(os.path.join(args.out_dir, name), rec.maps)
        n_words, h, w = rec.maps.shape
        index.append(f"{rec.timestep} {rec.layer} {n_words} {h} {w} {name}")
    with open(os.path.join(args.out_dir, "index.txt"), "w", encoding="ascii") as f:
        f.write("\n".join(index) + "\n")
    log.info("probe: wrote %d records", len(probe.records))
    return 0


def _cmd_eval(args) -> int:
    did_anything = False
    if args.mask_a or args.mask_b:
        if not (args.mask_a and args.mask_b):
            raise UsageError("--mask-a and --mask-b go together")
        iou = mask_iou(read_pgm(args.mask_a) > 127, read_pgm(args.mask_b) > 127)
        print(f"iou={iou:.6f}")
        did_anything = True
    if args.image and args.ref:
        score = toy_image_score(from_uint8(read_ppm(args.image)),
                                from_uint8(read_ppm(args.ref)))
        print(f"toy_image_score={score:.6f}")
        did_anything = True
    if args.image and args.config:
        config = load_prompt_config(args.config)
        score = toy_text_score(config.prompt, from_uint8(read_ppm(args.image)),
                               seed=config.params["engine_seed"])
        print(f"toy_text_score={score:.6f}")
        did_anything = True
    if not did_anything:
        raise UsageError("eval wants --mask-a/--mask-b, or --image with --ref/--config")
    return 0


def _cmd_ablate(args) -> int:
    request = _request_from_args(args)
    try:
        counts = [int(c) for c in args.regions.split(",") if c.strip()]
    except ValueError:
        raise UsageError(f"--regions must be a comma list of integers, got {args.regions!r}")
    report = ablate_regions(request, counts)
    for entry in report:
        print(f"regions={entry.regions} toy_text_score={entry.text_score:.6f} "
              f"toy_image_score={entry.image_score:.6f} seconds={entry.seconds:.3f}")
        if args.out_dir:
            os.makedirs(args.out_dir, exist_ok=True)
            write_ppm(os.path.join(args.out_dir, f"ablate_{entry.regions}region.ppm"),
                      to_uint8(entry.artifacts.image))
    return 0


def _cmd_fixtures(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    suite = fixture_lib.planted_fixture_suite(args.count, args.size, args.size,
                                              seed=args.seed)
    lines = []
    for i, (maps, boxes) in enumerate(suite):
        for label, values in maps.items():
            write_tensor(os.path.join(args.out_dir, f"fixture{i:03d}_{label}.catn"),
                         values)
            box = boxes[label]
            lines.append(f"{i:03d} {label} {box.x1} {box.x2} {box.y1} {box.y2}")
    with open(os.path.join(args.out_dir, "ground_truth.txt"), "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")
    log.info("fixtures: wrote %d maps", 3 * len(suite))
    return 0


_COMMANDS = {
    "segment": _cmd_segment,
    "layout": _cmd_layout,
    "generate": _cmd_generate,
    "probe": _cmd_probe,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "fixtures": _cmd_fixtures,
}


def cli_dispatch(argv) -> int:
    """Parse argv and run one subcommand; returns the process exit code."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: code={exc.code} detail={exc}", file=sys.stderr)
        return 2
    except RegionFuseError as exc:
        print(f"error: code={exc.code} detail={exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
