"""Command-line entry point: ``pgnseg <subcommand> ...``.

Diagnostics go to stderr; the path of the final report goes to stdout
(``oracle-check`` prints the report itself).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from pgnseg import bench, gradnorm, metamodel, metrics, oracle, segments
from pgnseg.scene import gen_scene
from pgnseg.tensor import read_npy, write_npy
from pgnseg.toynet import DEFAULT_DIMS, forward, gen_synthetic, load_bundle, save_bundle

ABLATION_PS = (0.1, 0.3, 0.5, 1.0, 2.0)
MODE_FLAGS = {"oh": "oh", "uni": "uni", "explicit": "explicit"}


class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    inputs: list = field(default_factory=list)
    modes: list = field(default_factory=lambda: ["oh", "uni"])
    layers: list = field(default_factory=lambda: ["last"])
    ps: list = field(default_factory=lambda: [2.0])
    labels: str | None = None
    gt: list = field(default_factory=list)
    ood_masks: list = field(default_factory=list)
    bins: int = metrics.DEFAULT_BINS
    thresholds: list = field(default_factory=lambda: list(metrics.DEFAULT_THRESHOLDS))
    sparsification_points: int = 50
    out: str | None = None
    seed: int = 42
    tolerance: float = 1e-4
    eps: float = 1e-3
    exact: bool = False
    l2: float = 1e-3
    ridge: float = metamodel.DEFAULT_RIDGE
    dims: dict = field(default_factory=lambda: dict(DEFAULT_DIMS))
    scene: bool = False
    repeats: int = 20
    warmup: int = 3
    pgm: bool = False

    def validate(self) -> "RunConfig":
        if any(not float(p) > 0 for p in self.ps):
            raise CliError(f"p values must be positive: {self.ps}")
        if any(not 0 < float(t) < 1 for t in self.thresholds):
            raise CliError(f"thresholds must lie in (0, 1): {self.thresholds}")
        for m in self.modes:
            if m not in MODE_FLAGS:
                raise CliError(f"unknown mode {m!r}")
        for layer in self.layers:
            if layer not in gradnorm.LAYERS:
                raise CliError(f"unknown layer {layer!r}")
        if "explicit" in self.modes and not self.labels:
            raise CliError("--mode explicit requires --labels")
        if self.bins < 1 or self.sparsification_points < 2:
            raise CliError("bins must be >= 1 and sparsification points >= 2")
        return self


_LIST_KEYS = {"inputs", "modes", "layers", "ps", "gt", "ood_masks", "thresholds"}


def build_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the JSON config file, then command-line flags."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        with open(args.config) as fh:
            data = json.load(fh)
        for k, v in data.items():
            if not hasattr(cfg, k):
                raise CliError(f"unknown config key {k!r}")
            setattr(cfg, k, v)
    for k in asdict(cfg):
        v = getattr(args, k, None)
        if v is None or (k in _LIST_KEYS and v == []):
            continue
        if k == "dims":
            merged = dict(cfg.dims)
            merged.update(v)
            v = merged
        setattr(cfg, k, v)
    cfg.ps = [float(p) for p in cfg.ps]
    cfg.thresholds = [float(t) for t in cfg.thresholds]
    return cfg.validate()


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _write_json(obj, path: Path) -> Path:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out or "out")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from None
    return out


def _load_inputs(cfg: RunConfig):
    if not cfg.inputs:
        raise CliError("no --input bundle given")
    loaded = []
    for path in cfg.inputs:
        try:
            params, psi_prev, manifest = load_bundle(path)
        except (OSError, KeyError, ValueError) as exc:
            raise CliError(f"cannot load bundle {path}: {exc}") from None
        loaded.append((Path(path), params, psi_prev, manifest))
    return loaded


def _mode_values(cfg: RunConfig, trace):
    out = []
    for m in cfg.modes:
        if m == "explicit":
            y = read_npy(cfg.labels).astype(np.float64)
            out.append(y)
        else:
            out.append(m)
    return out


def _heatmaps(cfg: RunConfig, trace, params):
    maps = []
    for mode in _mode_values(cfg, trace):
        for layer in cfg.layers:
            for p in cfg.ps:
                maps.append(gradnorm.pgn_heatmap(trace, params, mode, layer, p, exact=cfg.exact))
    return maps


def _aux_file(cfg_list: list, idx: int, bundle: Path, manifest: dict, key: str, what: str) -> np.ndarray:
    if cfg_list:
        if len(cfg_list) != 1 and len(cfg_list) <= idx:
            raise CliError(f"need one {what} file per input")
        path = Path(cfg_list[idx if len(cfg_list) > 1 else 0])
    elif key in manifest.get("labels", {}):
        path = bundle / manifest["labels"][key]["file"]
    else:
        raise CliError(f"no {what} for {bundle}; pass it explicitly")
    if not path.is_file():
        raise CliError(f"missing {what} file {path}")
    return read_npy(path)


# ---------------------------------------------------------------- commands


def cmd_gen_synthetic(cfg: RunConfig) -> Path:
    out = _out_dir(cfg)
    try:
        if cfg.scene:
            sc = gen_scene(cfg.seed, cfg.dims)
            params, psi_prev = sc.params, sc.psi_prev
        else:
            params, psi_prev = gen_synthetic(cfg.seed, cfg.dims)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    meta = {"seed": cfg.seed, "generator": "splitmix64", "kind": "scene" if cfg.scene else "synthetic"}
    if cfg.scene:
        write_npy(sc.gt.astype(np.int64), out / "gt.npy")
        write_npy(sc.ood_mask.astype(np.uint8), out / "ood_mask.npy")
        meta["labels"] = {
            "gt": {"file": "gt.npy", "shape": list(sc.gt.shape)},
            "ood_mask": {"file": "ood_mask.npy", "shape": list(sc.ood_mask.shape)},
        }
    save_bundle(out, params, psi_prev, meta)
    return out / "manifest.json"


def cmd_heatmap(cfg: RunConfig) -> Path:
    out = _out_dir(cfg)
    index = []
    for i, (bundle, params, psi_prev, _) in enumerate(_load_inputs(cfg)):
        prefix = f"img{i}_" if len(cfg.inputs) > 1 else ""
        trace = forward(params, psi_prev)
        for hm in _heatmaps(cfg, trace, params):
            files = gradnorm.write_heatmap(hm, out, prefix + hm.name)
            if cfg.pgm:
                gradnorm.write_pgm(hm.scores, out / f"{prefix}{hm.name}.pgm")
            index.append({"input": str(bundle), "files": [f.name for f in files], **hm.metadata()})
        for name, arr in gradnorm.baseline_maps(trace).items():
            fname = f"{prefix}baseline_{name}.npy"
            write_npy(arr.astype(np.float32), out / fname)
            index.append({"input": str(bundle), "files": [fname], "baseline": name})
    return _write_json({"heatmaps": index}, out / "heatmaps.json")


def cmd_oracle_check(cfg: RunConfig) -> tuple[oracle.OracleReport, Path | None]:
    if cfg.inputs:
        _, params, psi_prev, _ = _load_inputs(cfg)[0]
    else:
        params, psi_prev = gen_synthetic(cfg.seed, cfg.dims)
    modes = [m for m in _mode_values(cfg, None)]
    try:
        report = oracle.check_closed_form(params, psi_prev, modes, cfg.layers, cfg.ps,
                                          cfg.tolerance, cfg.eps, exact=cfg.exact)
    except oracle.OracleSizeError as exc:
        raise CliError(str(exc), code=2) from None
    path = None
    if cfg.out:
        path = _out_dir(cfg) / "oracle_report.json"
        path.write_text(report.to_json() + "\n")
    return report, path


def _scored_maps(cfg, trace, params):
    """PGN heatmaps plus the two softmax baselines as (name, provenance, uncertainty, confidence-or-None)."""
    items = [(hm.name, hm.metadata(), hm.scores, None) for hm in _heatmaps(cfg, trace, params)]
    base = gradnorm.baseline_maps(trace)
    items.append(("max_softmax", {"baseline": "max_softmax"}, base["max_softmax"], 1.0 - base["max_softmax"]))
    items.append(("entropy", {"baseline": "entropy"}, base["entropy"], 1.0 - base["entropy"]))
    return items


def _collect(cfg):
    """Per input: trace, params and the scored maps."""
    per_input = []
    for i, (bundle, params, psi_prev, manifest) in enumerate(_load_inputs(cfg)):
        trace = forward(params, psi_prev)
        per_input.append((i, bundle, manifest, params, trace, _scored_maps(cfg, trace, params)))
    return per_input


def eval_pixel(cfg: RunConfig, per_input) -> list[metrics.MetricsReport]:
    gts = []
    for i, bundle, manifest, _, trace, _ in per_input:
        gt = _aux_file(cfg.gt, i, bundle, manifest, "gt", "ground truth").astype(np.int64)
        if gt.shape != trace.pred.shape:
            raise CliError(f"ground truth shape {gt.shape} differs from prediction {trace.pred.shape}")
        gts.append(gt)
    fractions = [k / cfg.sparsification_points for k in range(cfg.sparsification_points)]
    reports = []
    for j, (name, prov, _, _) in enumerate(per_input[0][5]):
        unc, conf, correct, brier = [], [], [], []
        for (_, _, _, _, trace, maps), gt in zip(per_input, gts):
            valid = gt != segments.IGNORE_LABEL
            if np.any(gt[valid] >= trace.num_classes) or np.any(gt[valid] < 0):
                raise CliError("ground truth holds class ids outside the model's range")
            unc.append(maps[j][2][valid])
            conf.append(None if maps[j][3] is None else maps[j][3][valid])
            correct.append((trace.pred == gt)[valid])
            brier.append(metrics.brier_errors(trace.probs[:, valid], gt[valid]))
        u = np.concatenate(unc)
        top = float(u.max()) if u.size else 0.0
        c = metrics.confidence_from_uncertainty(u, top) if conf[0] is None else np.concatenate(conf)
        m = {
            "ece": metrics.ece(c, np.concatenate(correct), cfg.bins),
            "ause": metrics.ause(u, np.concatenate(brier), fractions),
            "accuracy": float(np.concatenate(correct).mean()),
        }
        reports.append(metrics.MetricsReport(m, {"bins": cfg.bins, "sparsification_points": cfg.sparsification_points,
                                                 "normalization_max": top}, {"score": name, **prov}))
    return reports


def eval_segment(cfg: RunConfig, per_input, out: Path) -> list[metrics.MetricsReport]:
    tables = []
    for i, bundle, manifest, _, trace, maps in per_input:
        gt = _aux_file(cfg.gt, i, bundle, manifest, "gt", "ground truth").astype(np.int64)
        if gt.shape != trace.pred.shape:
            raise CliError(f"ground truth shape {gt.shape} differs from prediction {trace.pred.shape}")
        seg = segments.connected_components(trace.pred)
        pgn = [(name, scores) for name, prov, scores, conf in maps if conf is None]
        tables.append(segments.build_feature_table(trace.probs, seg, pgn, gt, image_id=i))
    table = segments.SegmentTable.concat(tables)
    table.to_csv(out / "segments.csv")
    c = per_input[0][4].num_classes
    n_base = 5 + c + 10
    names = table.feature_names
    feature_sets = {"metaseg": names[:n_base], "pgn": names[n_base:], "metaseg+pgn": names}
    if len(names) == n_base:
        feature_sets = {"metaseg": names}
    reports = []
    for set_name, cols in feature_sets.items():
        res = metamodel.evaluate_meta_models(table, cols, l2=cfg.l2, ridge=cfg.ridge)
        for key, err in res["errors"].items():
            _log(f"eval-segment [{set_name}] {key}: {err}")
        m = {"auroc": res["auroc"], "r2": res["r2"], "n_train": res["n_train"], "n_test": res["n_test"],
             "n_segments": len(table)}
        reports.append(metrics.MetricsReport(m, {"l2": cfg.l2, "ridge": cfg.ridge, "split": "sha256 70/30",
                                                 "errors": res["errors"]}, {"features": set_name}))
    return reports


def eval_ood(cfg: RunConfig, per_input) -> list[metrics.MetricsReport]:
    masks = []
    for i, bundle, manifest, _, trace, _ in per_input:
        mask = _aux_file(cfg.ood_masks, i, bundle, manifest, "ood_mask", "OoD mask").astype(bool)
        if mask.shape != trace.pred.shape:
            raise CliError(f"OoD mask shape {mask.shape} differs from prediction {trace.pred.shape}")
        masks.append(mask)
    reports = []
    for j, (name, prov, _, _) in enumerate(per_input[0][5]):
        scores = [maps[j][2] for *_, maps in per_input]
        flat_s = np.concatenate([s.ravel() for s in scores])
        flat_y = np.concatenate([mk.ravel() for mk in masks])
        top = float(flat_s.max())
        seg_m = metrics.ood_segment_metrics([metrics.normalize_scores(s, top) for s in scores], masks,
                                            cfg.thresholds)
        m = {
            "auprc": metrics.auprc(flat_s, flat_y),
            "fpr95": metrics.fpr_at_95_tpr(flat_s, flat_y),
            "sIoU": seg_m["sIoU"],
            "PPV": seg_m["PPV"],
            "F1": seg_m["F1"],
        }
        reports.append(metrics.MetricsReport(m, {"thresholds": cfg.thresholds, "normalization_max": top},
                                             {"score": name, **prov}))
    return reports


def cmd_eval(cfg: RunConfig, which: tuple[str, ...]) -> Path:
    out = _out_dir(cfg)
    per_input = _collect(cfg)
    sections = {}
    try:
        if "pixel" in which:
            sections["pixel"] = eval_pixel(cfg, per_input)
        if "segment" in which:
            sections["segment"] = eval_segment(cfg, per_input, out)
        if "ood" in which:
            sections["ood"] = eval_ood(cfg, per_input)
    except metamodel.UndefinedMetricError as exc:
        raise CliError(f"undefined metric: {exc}") from None
    name = "eval" if len(which) > 1 else f"eval_{which[0]}"
    for section, reports in sections.items():
        metrics.write_reports_csv(reports, out / f"{name}_{section}.csv")
    report = {section: [r.to_dict() for r in reports] for section, reports in sections.items()}
    report["inputs"] = [str(p) for p in cfg.inputs]
    return _write_json(report, out / f"{name}.json")


def cmd_bench(cfg: RunConfig) -> Path:
    out = _out_dir(cfg)
    if cfg.inputs:
        _, params, psi_prev, _ = _load_inputs(cfg)[0]
    else:
        params, psi_prev = gen_synthetic(cfg.seed, cfg.dims)
    modes = [m for m in cfg.modes if m != "explicit"] or ["oh", "uni"]
    result = {"overhead": {}}
    for layer in cfg.layers:
        result["overhead"][layer] = bench.bench_overhead(params, psi_prev, modes, layer, cfg.ps[0],
                                                         cfg.repeats, cfg.warmup)
    trace = forward(params, psi_prev)
    s, psi = gradnorm.last_layer_grad_factors(trace, "uni")
    result["factored_vs_materialized"] = bench.bench_factored_vs_materialized(s, psi, cfg.ps[0])
    for layer, r in result["overhead"].items():
        _log(f"{layer}: forward {r['forward']['median_s'] * 1e3:.3f} ms, "
             f"forward+PGN {r['forward_plus_pgn']['median_s'] * 1e3:.3f} ms, ratio {r['overhead_ratio']:.3f}")
    return _write_json(result, out / "bench.json")


# ---------------------------------------------------------------- parsing


def _dims_arg(text: str) -> dict:
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 5:
        raise argparse.ArgumentTypeError("dims must be c_prev,c_feat,num_classes,height,width")
    return dict(zip(("c_prev", "c_feat", "num_classes", "height", "width"), parts))


def _thresholds_arg(text: str) -> list:
    return [float(v) for v in text.split(",")]


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgnseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, inputs=True):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--dims", type=_dims_arg, help="c_prev,c_feat,num_classes,height,width")
        if inputs:
            p.add_argument("--input", dest="inputs", action="append", default=[], help="bundle directory")
        return p

    def scoring(p):
        p.add_argument("--mode", dest="modes", action="append", default=[], choices=sorted(MODE_FLAGS))
        p.add_argument("--layer", dest="layers", action="append", default=[], choices=gradnorm.LAYERS)
        p.add_argument("--p", dest="ps", action="append", default=[], type=float)
        p.add_argument("--labels", help="explicit label NPY (C x H x W)")
        p.add_argument("--exact", action="store_true", default=None,
                       help="use softmax - y instead of softmax * (1 - y)")
        return p

    g = common(sub.add_parser("gen-synthetic", help="write a deterministic toy-head bundle"), inputs=False)
    g.add_argument("--scene", action="store_true", default=None, help="also write gt.npy and ood_mask.npy")

    h = scoring(common(sub.add_parser("heatmap", help="PGN heatmaps and softmax baselines")))
    h.add_argument("--pgm", action="store_true", default=None)

    o = scoring(common(sub.add_parser("oracle-check", help="compare closed forms with finite differences")))
    o.add_argument("--tolerance", type=float)
    o.add_argument("--eps", type=float)

    for name in ("eval-pixel", "eval-segment", "eval-ood", "eval"):
        e = scoring(common(sub.add_parser(name, help="evaluation report")))
        e.add_argument("--gt", action="append", default=[], help="ground-truth class map NPY (255 = ignore)")
        e.add_argument("--ood-mask", dest="ood_masks", action="append", default=[])
        e.add_argument("--bins", type=int)
        e.add_argument("--thresholds", type=_thresholds_arg)
        e.add_argument("--sparsification-points", type=int)
        e.add_argument("--l2", type=float)
        e.add_argument("--ridge", type=float)

    b = scoring(common(sub.add_parser("bench", help="time forward vs forward + PGN")))
    b.add_argument("--repeats", type=int)
    b.add_argument("--warmup", type=int)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = build_config(args)
        cmd = args.command
        if cmd == "gen-synthetic":
            path = cmd_gen_synthetic(cfg)
        elif cmd == "heatmap":
            path = cmd_heatmap(cfg)
        elif cmd == "oracle-check":
            report, _ = cmd_oracle_check(cfg)
            print(report.to_json())
            return 0 if report.passed else 1
        elif cmd == "bench":
            path = cmd_bench(cfg)
        else:
            which = ("pixel", "segment", "ood") if cmd == "eval" else (cmd.split("-", 1)[1],)
            path = cmd_eval(cfg, which)
    except CliError as exc:
        _log(f"error: {exc}")
        return exc.code
    except (OSError, ValueError, ArithmeticError) as exc:
        _log(f"error: {exc}")
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
