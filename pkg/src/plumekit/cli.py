"""Command-line entry points.

Every subcommand reads a :class:`~plumekit.config.RunConfig`, writes its
outputs under ``--out`` and a machine-readable ``run_log_<command>.json``.
Exit status: 0 success, 1 failed precondition, 2 usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config, rng_stream, split_dataset
from .cube import RadianceCube
from .exceptions import ConfigError, LoadError, PlumekitError
from .injection import kg_per_hr_to_mol_per_s, sample_eval_emission, scale_plume
from .io import read_raster, read_tile, write_geojson, write_raster, write_tile

TILE_GLOB = "*.tile"


# --------------------------------------------------------------------------
# shared helpers

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import scipy
    import sklearn
    return {"plumekit": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}


def _srfs(cfg):
    from .spectral_lut import emit_like_srfs, load_srfs
    srfs = load_srfs(cfg.srf) if cfg.srf else emit_like_srfs()
    srfs = [s for s in srfs if s.center_um >= cfg.swir_min_um]
    if not srfs:
        raise ConfigError(f"no bands at or above {cfg.swir_min_um} um")
    return srfs


def _pair(cfg):
    from .spectral_lut import load_transmittance_pair, synthetic_transmittance
    if bool(cfg.transmittance_std) != bool(cfg.transmittance_ch4):
        raise ConfigError("transmittance_std and transmittance_ch4 must be given together")
    if cfg.transmittance_std:
        return load_transmittance_pair(cfg.transmittance_std, cfg.transmittance_ch4)
    return synthetic_transmittance()


def _lut(cfg, srfs):
    from .spectral_lut import build_lut, load_lut
    lut = load_lut(cfg.lut) if cfg.lut else build_lut(_pair(cfg), srfs)
    if lut.n_bands != len(srfs):
        raise LoadError(f"LUT has {lut.n_bands} bands but the SRF set has {len(srfs)}")
    return lut


def _cube_from_raster(path, srfs):
    r = read_raster(path)
    values = np.moveaxis(np.asarray(r.data, dtype=float), 0, -1)
    if values.shape[-1] != len(srfs):
        raise LoadError(f"{path}: {values.shape[-1]} bands, expected {len(srfs)}")
    return RadianceCube(values, wavelengths=np.array([s.center_um for s in srfs])), r


def _tiles(cfg):
    if not cfg.tiles:
        raise ConfigError("no tile directory given (--tiles or tiles = ...)")
    paths = sorted(Path(cfg.tiles).glob(TILE_GLOB))
    if not paths:
        raise LoadError(f"no tile containers in {cfg.tiles}")
    return paths


def _ground_truth(tile):
    from .slot_match import GroundTruthSet
    man = tile.manifest or {}
    rates = [p["emission_kg_per_hr"] for p in man.get("plumes", [])]
    if len(rates) != len(tile.plumes):
        raise LoadError("tile manifest lacks per-plume emission rates")
    shape = tile.radiance.shape[:2] if tile.radiance is not None else tile.plumes[0].conc.shape
    # plumes without a labelled pixel in the tile carry nothing to detect
    keep = [(p, r) for p, r in zip(tile.plumes, rates) if p.mask.any()]
    enh = [scale_plume(p, kg_per_hr_to_mol_per_s(r)) for p, r in keep]
    gt = GroundTruthSet.from_plumes(enh, [p.mask for p, _ in keep],
                                    [p.origin_px for p, _ in keep], shape=shape)
    erbws = tuple(r / max(p.wind_speed_mps, 1e-6) if np.isfinite(p.wind_speed_mps) else np.inf
                  for p, r in keep)
    return gt, erbws


# --------------------------------------------------------------------------
# subcommands

def cmd_build_lut(cfg, args, log):
    from .spectral_lut import build_lut, save_lut
    srfs = _srfs(cfg)
    lut = build_lut(_pair(cfg), srfs)
    out = Path(cfg.out) / (args.name or "methane.lut")
    save_lut(lut, out)
    log["outputs"].append(str(out))


def cmd_simulate(cfg, args, log):
    from .puff_sim import SimConfig, crop_tile, sample_config, simulate_tile
    out = Path(cfg.out)
    ids = [f"tile_{i:05d}" for i in range(args.n_tiles)]
    splits = split_dataset(ids, cfg.split_fractions, cfg.seed)
    valid = set(SimConfig.__dataclass_fields__)
    bad = set(cfg.sim) - valid
    if bad:
        raise ConfigError(f"unknown simulator keys: {sorted(bad)}")
    for tid in ids:
        rng = rng_stream(cfg.seed, f"sim:{tid}")
        over = dict(cfg.sim)
        if args.plumes:
            over["num_plumes"] = args.plumes
        sim_cfg = sample_config(rng, **over)
        plumes = simulate_tile(sim_cfg, rng)
        plumes, offset = crop_tile(plumes, "center")
        pair_rng = rng_stream(cfg.seed, f"pairing:{tid}")
        rates = [sample_eval_emission(pair_rng) for _ in plumes]
        manifest = {"tile_id": tid, "source_granule": None, "split": splits[tid],
                    "root_seed": cfg.seed, "sim_seed": sim_cfg.seed, "crop_offset": list(offset),
                    "sim_config": {k: v for k, v in asdict(sim_cfg).items()},
                    "plumes": [{"id": f"{tid}_p{k}", "emission_kg_per_hr": r,
                                "origin_px": None if p.origin_px is None else list(p.origin_px),
                                "wind_speed_mps": p.wind_speed_mps}
                               for k, (p, r) in enumerate(zip(plumes, rates))]}
        path = out / f"{tid}.tile"
        write_tile(path, plumes, sim_cfg.pixel_size_m, manifest=manifest)
        log["outputs"].append(str(path))


def cmd_inject(cfg, args, log):
    from .injection import inject_enhancement
    from .scenes import synthetic_scene
    srfs = _srfs(cfg)
    lut = _lut(cfg, srfs)
    pair = _pair(cfg)
    out = Path(cfg.out)
    for path in _tiles(cfg):
        tile = read_tile(path)
        gt, _ = _ground_truth(tile)
        shape = gt.shape
        tid = (tile.manifest or {}).get("tile_id", path.stem)
        if args.background:
            cube, _ = _cube_from_raster(args.background, srfs)
            if (cube.rows, cube.cols) != tuple(shape):
                raise LoadError("background raster does not match the tile grid")
        else:
            cube, _ = synthetic_scene(shape, srfs, pair, rng_stream(cfg.seed, f"scene:{tid}"),
                                      snr=args.snr)
        total = gt.enh.sum(axis=0) if gt.count else np.zeros(shape)
        injected = inject_enhancement(cube, total, lut, args.plm)
        dst = out / path.name
        write_tile(dst, tile.plumes, tile.pixel_size_m, injected.values, tile.manifest)
        log["outputs"].append(str(dst))


def _mf_backend(cfg, srfs, plm):
    from .retrieval import MatchedFilterBackend, unit_absorption_spectrum
    return MatchedFilterBackend(signature=unit_absorption_spectrum(_lut(cfg, srfs), plm)).fit()


def cmd_retrieve(cfg, args, log):
    from .retrieval import save_external
    srfs = _srfs(cfg)
    backend = _mf_backend(cfg, srfs, args.plm)
    out = Path(cfg.out)
    for path in _tiles(cfg):
        tile = read_tile(path)
        if tile.radiance is None:
            raise LoadError(f"{path}: tile has no radiance; run inject first")
        tid = (tile.manifest or {}).get("tile_id", path.stem)
        cube = RadianceCube(tile.radiance)
        pred = backend.predict(cube)
        m = save_external(pred, out / "pred", tid)
        log["outputs"].append(str(m))


def cmd_granule(cfg, args, log):
    from .granule import GranulePipeline
    from .spectral_fit import SpectralFitter, write_fit_report
    srfs = _srfs(cfg)
    if not cfg.granule:
        raise ConfigError("no granule raster given (--granule or granule = ...)")
    cube, raster = _cube_from_raster(cfg.granule, srfs)
    water = None
    if args.water:
        water = read_raster(args.water).data[0].astype(bool)
    lut = _lut(cfg, srfs)
    fitter = None if args.no_fit else SpectralFitter(lut=lut, plm=args.plm,
                                                    wavelengths=cube.wavelengths).fit()
    pipe = GranulePipeline(backend=_mf_backend(cfg, srfs, args.plm), fitter=fitter,
                           plume_threshold=cfg.plume_threshold,
                           origin_threshold=cfg.origin_threshold, min_peak=cfg.peak_enh_ppm_m,
                           n_jobs=cfg.threads).fit()
    res = pipe.run(cube, water, raster.geotransform)
    out = Path(cfg.out)
    write_geojson(out / "plumes.geojson", res.features(include_rejected=True),
                  {"water_filter_applied": res.water_filter_applied,
                   "n_kept": len(res.records), "n_rejected": len(res.rejected),
                   "notes": res.notes})
    write_raster(out / "mosaic.rst", res.mosaic.values[None].astype(np.float32),
                 raster.geotransform)
    write_fit_report(out / "fit_report.csv",
                     [(r.plume_id, r.fit) for r in res.records if r.fit is not None])
    log["outputs"] += [str(out / n) for n in ("plumes.geojson", "mosaic.rst", "fit_report.csv")]
    log["summary"] = {"kept": len(res.records), "rejected": len(res.rejected),
                      "candidates": res.n_candidates}


def cmd_spectral_fit(cfg, args, log):
    from .spectral_fit import SpectralFitter, write_fit_report, write_fit_spectrum
    srfs = _srfs(cfg)
    if not cfg.granule:
        raise ConfigError("no radiance raster given (--granule)")
    cube, _ = _cube_from_raster(cfg.granule, srfs)
    mask = read_raster(args.mask).data[0].astype(bool)
    enh = read_raster(args.enh).data[0].astype(float)
    others = [read_raster(p).data[0].astype(bool) for p in args.other_mask or []]
    fitter = SpectralFitter(lut=_lut(cfg, srfs), plm=args.plm, wavelengths=cube.wavelengths).fit()
    res = fitter.score_plume(cube, mask, enh, others)
    out = Path(cfg.out)
    write_fit_report(out / "fit_report.csv", [(args.plume_id, res)])
    write_fit_spectrum(out / f"{args.plume_id}_spectrum.csv", res)
    log["outputs"] += [str(out / "fit_report.csv"), str(out / f"{args.plume_id}_spectrum.csv")]
    log["summary"] = {"fit_enh": res.fit_enh, "valid": res.valid}


def cmd_evaluate(cfg, args, log):
    from .metrics import EvalTile, evaluate
    from .retrieval import load_external
    tiles = []
    for path in _tiles(cfg):
        tile = read_tile(path)
        tid = (tile.manifest or {}).get("tile_id", path.stem)
        gt, erbws = _ground_truth(tile)
        pred = load_external(Path(args.pred) / f"{tid}.json", gt.shape).prediction
        tiles.append(EvalTile(pred, gt, erbws))
    rep = evaluate(tiles, plume_threshold=cfg.plume_threshold,
                   origin_threshold=cfg.origin_threshold,
                   pr_thresholds=np.round(np.arange(0.1, 0.95, 0.1), 2))
    out = Path(cfg.out)
    rep.write_csv(out / "eval.csv")
    rep.write_long_csv(out / "eval_long.csv")
    rep.write_text(out / "eval.txt")
    log["outputs"] += [str(out / n) for n in ("eval.csv", "eval_long.csv", "eval.txt")]
    log["summary"] = rep.detection.get("all", {})


def cmd_report(cfg, args, log):
    try:
        fc = json.loads(Path(args.geojson).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read {args.geojson}: {exc}") from exc
    lines = []
    kept = [f for f in fc["features"] if not f["properties"].get("rejection_reason")]
    rej = [f for f in fc["features"] if f["properties"].get("rejection_reason")]
    lines.append(f"plumes kept: {len(kept)}  rejected: {len(rej)}")
    for f in kept + rej:
        p = f["properties"]
        fit = "n/a" if p.get("fit_enh") is None else \
            f"fit {p['fit_enh']:.0f} ppm-m ({'valid' if p.get('fit_valid') else 'invalid'})"
        lines.append(f"  {p['plume_id']}  origin ({p['origin_row']:.1f}, {p['origin_col']:.1f})  "
                     f"peak {p['peak_enh_ppm_m']:.0f}  area {p['area_px']}  "
                     f"df {p['detection_fraction']:.2f}  {fit}"
                     + (f"  rejected: {p['rejection_reason']}" if p.get("rejection_reason")
                        else ""))
    out = Path(cfg.out) / "report.txt"
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    log["outputs"].append(str(out))


COMMANDS = {
    "build-lut": cmd_build_lut, "simulate": cmd_simulate, "inject": cmd_inject,
    "retrieve": cmd_retrieve, "granule": cmd_granule, "spectral-fit": cmd_spectral_fit,
    "evaluate": cmd_evaluate, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out")
    common.add_argument("--lut", help="prebuilt LUT file (else built from the inputs)")
    common.add_argument("--srf", help="SRF CSV (center_um, fwhm_um)")
    common.add_argument("--tiles", help="directory of tile containers")
    common.add_argument("--granule", help="radiance raster container")

    p = argparse.ArgumentParser(prog="plumekit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("build-lut", parents=[common], help="build the methane LUT")
    s.add_argument("--name", help="output file name")
    s = sub.add_parser("simulate", parents=[common], help="simulate plume tiles")
    s.add_argument("--n-tiles", type=int, default=4)
    s.add_argument("--plumes", type=int, help="plumes per tile (default: sampled)")
    s = sub.add_parser("inject", parents=[common], help="inject plumes into radiance")
    s.add_argument("--background", help="background radiance raster")
    s.add_argument("--snr", type=float, default=400.0)
    s.add_argument("--plm", type=float, default=2.0)
    s = sub.add_parser("retrieve", parents=[common], help="matched-filter slot predictions")
    s.add_argument("--plm", type=float, default=2.0)
    s = sub.add_parser("granule", parents=[common], help="granule-scale plume records")
    s.add_argument("--water", help="water mask raster")
    s.add_argument("--plm", type=float, default=2.0)
    s.add_argument("--no-fit", action="store_true", help="skip spectral-fit vetting")
    s = sub.add_parser("spectral-fit", parents=[common], help="vet one plume mask")
    s.add_argument("--mask", required=True)
    s.add_argument("--enh", required=True)
    s.add_argument("--other-mask", action="append")
    s.add_argument("--plume-id", default="plume")
    s.add_argument("--plm", type=float, default=2.0)
    s = sub.add_parser("evaluate", parents=[common], help="evaluate predictions against tiles")
    s.add_argument("--pred", required=True, help="directory of prediction manifests")
    s = sub.add_parser("report", parents=[common], help="text summary of a plume GeoJSON")
    s.add_argument("--geojson", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    overrides = {k: getattr(args, k) for k in ("seed", "threads", "out", "lut", "srf", "tiles",
                                               "granule")}
    t0 = time.perf_counter()
    log = {"command": args.command, "argv": list(sys.argv[1:] if argv is None else argv),
           "started": time.strftime("%Y-%m-%dT%H:%M:%S"), "versions": _versions(),
           "outputs": [], "inputs": {}}
    try:
        cfg = load_config(args.config, overrides=overrides)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        log["config"] = asdict(cfg)
        log["seed"] = cfg.seed
        for key in ("lut", "srf", "granule", "transmittance_std", "transmittance_ch4"):
            v = getattr(cfg, key)
            if v and Path(v).is_file():
                log["inputs"][key] = {"path": v, "sha256": _sha256(v)}
        COMMANDS[args.command](cfg, args, log)
    except PlumekitError as exc:
        print(f"plumekit {args.command}: {exc}", file=sys.stderr)
        return 1
    log["seconds"] = round(time.perf_counter() - t0, 3)
    (out / f"run_log_{args.command}.json").write_text(
        json.dumps(log, indent=1, default=str), encoding="utf-8")
    return 0


def entry():  # pragma: no cover
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
