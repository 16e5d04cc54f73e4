"""Command-line entry point: ``voiplace <subcommand> ...``.

Exit status: 0 success, 1 usage error, 2 data error, 3 tool or endpoint error.
JSON artifacts carry the package version, the fully resolved run
configuration and the sha256 of every input file; they contain no
timestamps, so identical invocations give identical bytes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from voiplace import __version__
from voiplace.errors import DataError, ToolError, VoiplaceError
from voiplace.volume import Label, LabelVolume, load_label_volume, skull_distance_map, standardize, tissue_volume

log = logging.getLogger("voiplace")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TOOL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers
def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_digests(*paths) -> Dict[str, str]:
    out = {}
    for p in paths:
        if p is None:
            continue
        out[str(p)] = file_sha256(p)
        if str(p).lower().endswith(".json"):
            # the raw+json format keeps voxels in a sibling file
            try:
                meta = json.loads(Path(p).read_text(encoding="utf-8"))
            except ValueError:
                continue
            if isinstance(meta, dict) and isinstance(meta.get("data"), str):
                raw = Path(p).parent / meta["data"]
                if raw.exists():
                    out[str(raw)] = file_sha256(raw)
    return out


def _clean(obj):
    """JSON-safe copy: non-finite floats become null, tuples become lists."""
    if isinstance(obj, float):
        return obj if np.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def artifact(kind: str, config: dict, inputs: Dict[str, str], result) -> dict:
    return _clean({"tool": {"name": "voiplace", "version": __version__}, "kind": kind,
                   "config": config, "inputs": inputs, "result": result})


def write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, allow_nan=False) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _read_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"file not found: {path}") from exc
    except ValueError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc


def _csv_list(text: str) -> List[str]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise UsageError("expected a comma-separated, non-empty list")
    return items


# ---------------------------------------------------------------- config
def _search_config(args):
    from voiplace.search import SearchConfig

    base = {}
    if getattr(args, "search_config", None):
        base = _read_json(args.search_config)
    base["seed"] = args.seed
    try:
        return SearchConfig.from_json(base)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid search configuration: {exc}") from exc


def _extra_profiles(args):
    from voiplace.objective import load_profiles

    return load_profiles(args.profile_file) if getattr(args, "profile_file", None) else {}


def _resolve(names, extra):
    from voiplace.objective import resolve_profile

    return [resolve_profile(n, extra) for n in names]


def run_config(args, **extra) -> dict:
    """Resolved, explicit configuration echoed into artifacts (thread count excluded)."""
    cfg = {"command": args.command, "seed": args.seed, "verbosity": args.verbose,
           "profile_file": getattr(args, "profile_file", None),
           "label_map": getattr(args, "label_map", None), "brain_mask": getattr(args, "brain_mask", None),
           "standardize": getattr(args, "standardize", None)}
    cfg.update(extra)
    return cfg


def _load(args) -> LabelVolume:
    v = load_label_volume(args.volume, args.label_map, args.brain_mask)
    if args.standardize:
        v = standardize(v)
    return v


# ---------------------------------------------------------------- commands
def cmd_info(args) -> int:
    v = _load(args)
    vols = {lab.name: tissue_volume(v, lab) for lab in Label}
    if args.json:
        print(json.dumps({"dims": list(v.dims), "spacing_mm": list(v.spacing), "origin_mm": list(v.origin),
                          "class_volumes_ml": vols, "volume_digest": v.digest}, indent=2))
        return EXIT_OK
    print(f"dims        {v.dims[0]} x {v.dims[1]} x {v.dims[2]}")
    print(f"spacing_mm  {v.spacing[0]:g} x {v.spacing[1]:g} x {v.spacing[2]:g}")
    print(f"origin_mm   {v.origin[0]:g}, {v.origin[1]:g}, {v.origin[2]:g}")
    for name, ml in vols.items():
        print(f"{name:<14}{ml:10.3f} mL")
    return EXIT_OK


def cmd_phantom(args) -> int:
    from voiplace.io import save_label_volume
    from voiplace.phantom import PhantomSpec, cube_phantom_spec, generate_phantom

    if args.spec:
        try:
            spec = PhantomSpec.from_json(_read_json(args.spec))
        except (KeyError, TypeError) as exc:
            raise DataError(f"invalid phantom spec {args.spec}: {exc}") from exc
    else:
        spec = cube_phantom_spec()
    try:
        v = generate_phantom(spec)
    except ValueError as exc:
        raise DataError(f"invalid phantom spec: {exc}") from exc
    save_label_volume(args.output, v)
    log.info("wrote %s (%s)", args.output, v.digest[:12])
    return EXIT_OK


def cmd_place(args) -> int:
    from voiplace.search import search_full

    v = _load(args)
    d = skull_distance_map(v)
    (profile,) = _resolve([args.profile], _extra_profiles(args))
    cfg = _search_config(args)
    res = search_full(v, d, profile, cfg)
    conf = run_config(args, profile=profile.to_json() | {"name": profile.name}, search=cfg.to_json())
    art = artifact("placement", conf, _input_digests(args.volume, args.profile_file), res.to_json())
    print(json.dumps(art["result"], indent=2))
    if args.output:
        write_json(args.output, art)
    return EXIT_OK


def cmd_candidates(args) -> int:
    from voiplace.search import generate_candidates

    v = _load(args)
    d = skull_distance_map(v)
    profiles = _resolve(_csv_list(args.profiles), _extra_profiles(args))
    cfg = _search_config(args)
    cset = generate_candidates(v, d, profiles, cfg, args.interval, args.cap, threads=args.threads)
    conf = run_config(args, profiles=[p.name for p in profiles], interval_ml=args.interval, cap=args.cap,
                      search=cfg.to_json(), output=args.output)
    write_json(args.output, artifact("candidates", conf, _input_digests(args.volume, args.profile_file),
                                     cset.to_json()))
    log.info("%d candidates -> %s", len(cset.candidates), args.output)
    return EXIT_OK


def _load_candidates(path):
    from voiplace.search import CandidateSet

    obj = _read_json(path)
    try:
        return CandidateSet.from_json(obj.get("result", obj))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path} is not a candidate set: {exc}") from exc


def cmd_metrics(args) -> int:
    from voiplace.metrics import evaluate_metrics, to_csv

    v = _load(args)
    d = skull_distance_map(v)
    cset = _load_candidates(args.candidates)
    extra = _extra_profiles(args)
    profiles = _resolve(args.profile, extra) if args.profile else None
    report = evaluate_metrics(cset, v, d, profiles)
    fmt = args.format or ("csv" if str(args.output or "").lower().endswith(".csv") else "json")
    if fmt == "csv":
        text = to_csv(report)
    else:
        conf = run_config(args, profiles=list(report.profiles), output=args.output)
        art = artifact("metrics", conf, _input_digests(args.volume, args.candidates, args.profile_file),
                       report.to_json())
        text = json.dumps(art, indent=2, allow_nan=False) + "\n"
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_agent(args) -> int:
    from voiplace.agent.llm import EndpointConfig
    from voiplace.agent.workflow import AgentConfig, run_workflow

    endpoint = EndpointConfig.from_env(args.llm_url, args.llm_model)
    extra = _extra_profiles(args)
    profiles = _csv_list(args.profiles)
    _resolve(profiles, extra)
    cfg = AgentConfig(selector=args.selector, max_iters=args.max_iters, retries=args.retries,
                      fallback_on_unreachable=args.fallback_on_unreachable, endpoint=endpoint,
                      profiles=tuple(profiles), interval_ml=args.interval, cap=args.cap,
                      search=_search_config(args), label_map=args.label_map or "canonical",
                      brain_mask=args.brain_mask, standardize=args.standardize, threads=args.threads)
    conf = run_config(args, agent=cfg.to_json(), instruction=args.instruction, output=args.output,
                      transcript=args.transcript)
    inputs = _input_digests(args.volume, args.brain_mask, args.profile_file)
    try:
        sel, transcript = run_workflow(args.instruction, args.volume, cfg, extra_profiles=extra)
    except VoiplaceError as exc:
        t = getattr(exc, "transcript", None)
        if t is not None and args.transcript:
            write_json(args.transcript, artifact("transcript", conf, inputs, t.to_json()))
        raise
    if args.transcript:
        write_json(args.transcript, artifact("transcript", conf, inputs, transcript.to_json()))
    art = artifact("selection", conf, inputs, sel.to_json())
    if args.output:
        write_json(args.output, art)
    print(f"selected {sel.id} ({sel.selector}): {sel.justification}")
    return EXIT_OK


def _load_theta(path):
    from voiplace.geometry import OrientedBox

    obj = _read_json(path)
    for probe in (lambda o: o, lambda o: o["result"]["theta"], lambda o: o["theta"], lambda o: o["result"]):
        try:
            cand = probe(obj)
            if isinstance(cand, dict) and "center_mm" in cand:
                return OrientedBox.from_json(cand)
        except (KeyError, TypeError):
            continue
    raise DataError(f"{path} holds no box (expected center_mm / lengths_mm / angles_deg)")


def cmd_export_mask(args) -> int:
    from voiplace.geometry import rasterize
    from voiplace.io import write_volume

    v = _load(args)
    box = _load_theta(args.theta)
    mask = rasterize(box, v).astype(np.uint8)
    write_volume(args.output, mask, v.spacing, v.origin)
    log.info("mask with %d voxels -> %s", int(mask.sum()), args.output)
    return EXIT_OK


def cmd_bench(args) -> int:
    from voiplace import bench
    from voiplace.plotting import plot_summary

    extra = _extra_profiles(args)
    profiles = _resolve(_csv_list(args.profiles), extra)
    try:
        specs = bench.suite_specs(args.suite, args.cases)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    cfg = _search_config(args)
    results = bench.run_suite(specs, profiles, cfg, threads=args.threads)
    table = bench.summarize(results, [p.name for p in profiles])
    out = Path(args.output)
    bench.write_text(out, bench.summary_csv(table))
    bench.write_text(out.with_name(out.stem + "_cases.csv"), bench.per_case_csv(results))
    fig = Path(args.figure) if args.figure else out.with_suffix(".png")
    plot_summary(table, fig)
    sys.stdout.write(bench.summary_csv(table))
    log.info("summary -> %s, figure -> %s", out, fig)
    return EXIT_OK


# ---------------------------------------------------------------- parser
def _volume_options(p, volume=True):
    if volume:
        p.add_argument("volume", help="label volume (.nii or raw+json .json)")
    p.add_argument("--label-map", default=None, help="'canonical' (default), 'brats' or a JSON code map")
    p.add_argument("--brain-mask", default=None, help="brain mask volume on the same grid")
    p.add_argument("--standardize", action="store_true", help="resample to 2 mm isotropic, 128^3")


def _search_options(p):
    p.add_argument("--search-config", help="JSON file overriding search parameters")
    p.add_argument("--profile-file", help="JSON file with additional named profiles")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="voiplace", description="MR spectroscopy VOI placement over labeled tumor volumes.")
    ap.add_argument("--version", action="version", version=f"voiplace {__version__}")
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                    help="worker threads (results do not depend on it)")
    ap.add_argument("--seed", type=int, default=0, help="seed recorded in the run configuration")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("info", help="print grid and per-class volumes")
    _volume_options(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("phantom", help="generate a synthetic phantom volume")
    p.add_argument("--spec", help="phantom spec JSON (default: the cube phantom)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("place", help="full search under one profile")
    _volume_options(p)
    _search_options(p)
    p.add_argument("--profile", default="balanced", help="profile name or profile file")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_place)

    p = sub.add_parser("candidates", help="reference plus position-conditioned candidates")
    _volume_options(p)
    _search_options(p)
    p.add_argument("--profiles", default="balanced,large_voi")
    p.add_argument("--interval", type=float, default=0.5, help="sampling interval in mL")
    p.add_argument("--cap", type=int, default=50, help="maximum number of sampled centers")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_candidates)

    p = sub.add_parser("metrics", help="metric table for a candidate set")
    _volume_options(p)
    p.add_argument("candidates")
    p.add_argument("--profile", action="append", help="profile name or file (repeatable)")
    p.add_argument("--profile-file", help="JSON file with additional named profiles")
    p.add_argument("--format", choices=("json", "csv"))
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("agent", help="run the four-tool workflow for an instruction")
    _volume_options(p)
    _search_options(p)
    p.add_argument("--instruction", required=True)
    p.add_argument("--selector", choices=("rule", "llm"), default="rule")
    p.add_argument("--max-iters", type=int, default=10)
    p.add_argument("--retries", type=int, default=3, help="invalid LLM replies tolerated")
    p.add_argument("--fallback-on-unreachable", action="store_true",
                   help="use the rule selector when the endpoint cannot be reached")
    p.add_argument("--llm-url", help="endpoint base URL (or VOIPLACE_LLM_URL)")
    p.add_argument("--llm-model", help="model id (or VOIPLACE_LLM_MODEL)")
    p.add_argument("--profiles", default="balanced,large_voi")
    p.add_argument("--interval", type=float, default=0.5)
    p.add_argument("--cap", type=int, default=50)
    p.add_argument("-o", "--output")
    p.add_argument("--transcript")
    p.set_defaults(func=cmd_agent)

    p = sub.add_parser("export-mask", help="rasterize a box onto the volume grid")
    _volume_options(p)
    p.add_argument("theta", help="box JSON, or an artifact holding one")
    p.add_argument("output")
    p.set_defaults(func=cmd_export_mask)

    p = sub.add_parser("bench", help="suite benchmark: mean ± SD per profile, with a figure")
    _search_options(p)
    p.add_argument("--suite", default="default", help="default | box | cube")
    p.add_argument("--profiles", default="balanced,large_voi")
    p.add_argument("--cases", type=int, default=0, help="first N cases only (0 = all)")
    p.add_argument("--figure", help="figure path (default: next to the csv, .png)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"voiplace: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"voiplace: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ToolError as exc:
        print(f"voiplace: tool error: {exc}", file=sys.stderr)
        return EXIT_TOOL
    except OSError as exc:
        print(f"voiplace: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
