"""Command-line entry point: ``tseg <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric or
training failure, 4 acceptance-check failure.  ``TSEG_LOG`` sets the log
level (default INFO).
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck, metrics, network, postprocess, training
from .data import (CropSpec, list_cases, make_phantom_case, preprocess_case, read_case,
                   read_nifti, write_case, write_nifti)
from .data.cases import MODALITIES, embed_prediction
from .errors import AcceptanceError, ContractError, FormatError, TsegError

log = logging.getLogger("tseg")

EXPECTED_TOTAL = 61843


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def load_run_config(path):
    """Read a run config file: ``{"train": {...}, "network": {...}, "crop": {...}}``."""
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    unknown = set(doc) - {"train", "network", "crop"}
    if unknown:
        raise ContractError(f"unknown config sections: {sorted(unknown)}")
    return doc


def _network_config(doc):
    return network.NetworkConfig.from_dict(doc.get("network", {}))


def _crop(doc):
    return CropSpec.from_dict(doc.get("crop", {}))


def _log_start(cmd, seed, cfg):
    log.info("%s: seed %s, config %s", cmd, seed, config_hash(cfg))


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise ContractError("--threads must be >= 1")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _require(path, what):
    if not Path(path).exists():
        raise FormatError(f"{what} {path} does not exist")


# -- subcommands -----------------------------------------------------------------

def cmd_paramcount(args):
    doc = load_run_config(args.config)
    cfg = _network_config(doc)
    _log_start("paramcount", 0, cfg.to_dict())
    params = network.build_network(cfg, seed=0)
    rows, total = network.count_parameters(params)
    if args.json:
        print(json.dumps({"rows": [r._asdict() for r in rows], "total": total}, indent=2))
    else:
        print(f"{'layer':>6} {'params':>10}")
        for r in rows:
            print(f"{r.layer:>6} {r.total:>10,}")
        print(f"{'total':>6} {total:>10,}")
    expect = args.expect_params
    if expect is None and args.config is None:
        expect = EXPECTED_TOTAL
    if expect is not None and total != expect:
        raise AcceptanceError(f"parameter total {total} != expected {expect}")
    return 0


def cmd_synth(args):
    if args.n < 1:
        raise ContractError("--n must be >= 1")
    _log_start("synth", args.seed, {"n": args.n, "empty": args.empty})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.n):
        case = make_phantom_case(args.seed, i, tumour=not args.empty)
        if args.empty:
            # no brain and no tumour: every modality and label voxel is 0
            for m in MODALITIES:
                case.modality(m).data[...] = 0
        write_case(case, out, compress=args.gzip)
        log.info("wrote %s", case.case_id)
    return 0


def cmd_train(args):
    _require(args.data, "data directory")
    doc = load_run_config(args.config)
    tdict = dict(doc.get("train", {}))
    for key in ("epochs", "micro_batch", "batch_slices", "seed"):
        val = getattr(args, key)
        if val is not None:
            tdict[key] = val
    tcfg = training.TrainConfig.from_dict(tdict)
    ncfg = _network_config(doc)
    crop = _crop(doc)
    case_dirs = list_cases(args.data)
    _log_start("train", tcfg.seed, {"train": tcfg.to_dict(), "network": ncfg.to_dict(),
                                    "crop": crop.to_dict()})
    cases = []
    for d in case_dirs:
        case = read_case(d)
        if case.labels is None:
            raise FormatError(f"case {case.case_id} has no label volume")
        cases.append(preprocess_case(case, crop))
    dataset = training.SliceDataset.from_cases(cases)
    log.info("training on %d cases, %d slices", len(cases), len(dataset))
    params = network.build_network(ncfg, seed=tcfg.seed)
    params, history = training.train(dataset, tcfg, params=params)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    network.save_model(params, out)
    log.info("final loss %.5f; model written to %s", history[-1] if history else float("nan"), out)
    return 0


def predict_case(params, case, crop, clamp_to_wt=False):
    """Native-resolution labels for one case: preprocess, infer, fuse, refine, embed."""
    pre = preprocess_case(case, crop, allow_empty=True)
    probs = network.predict_probabilities(params, pre.image_stack())
    labels = postprocess.fuse_branches(probs[0], probs[1], probs[2], clamp_to_wt=clamp_to_wt)
    labels = postprocess.refine_et(labels)
    full = embed_prediction(labels, crop, case.dims)
    full[~case.brain_mask()] = 0
    return full


def cmd_predict(args):
    _require(args.model, "model file")
    _require(args.case, "case path")
    doc = load_run_config(args.config)
    crop = _crop(doc)
    params = network.load_model(args.model, _network_config(doc) if "network" in doc else None)
    _log_start("predict", params.seed, {"network": params.config.to_dict(), "crop": crop.to_dict(),
                                        "clamp_to_wt": args.clamp_to_wt})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for d in list_cases(args.case):
        case = read_case(d, with_labels=False)
        labels = predict_case(params, case, crop, args.clamp_to_wt)
        path = out / f"{case.case_id}.nii.gz"
        write_nifti(path, labels, case.spacing, dtype=np.uint8)
        log.info("%s: %d tumour voxels -> %s", case.case_id, int((labels > 0).sum()), path)
    return 0


def _find_prediction(pred_dir, case_id):
    for name in (f"{case_id}.nii.gz", f"{case_id}.nii"):
        p = Path(pred_dir) / name
        if p.exists():
            return p
    raise FormatError(f"no prediction for case {case_id} in {pred_dir}")


def cmd_evaluate(args):
    _require(args.pred, "prediction directory")
    _require(args.truth, "truth directory")
    _log_start("evaluate", 0, {"report": args.report, "directed_hd": args.directed_hd})
    reports = []
    for d in list_cases(args.truth):
        case_id = d.name
        truth_path = next((d / f"{case_id}_seg{ext}" for ext in (".nii.gz", ".nii")
                           if (d / f"{case_id}_seg{ext}").exists()), None)
        if truth_path is None:
            raise FormatError(f"case {case_id} has no label volume")
        truth, spacing = read_nifti(truth_path)
        pred, _ = read_nifti(_find_prediction(args.pred, case_id))
        rep = metrics.evaluate_case(pred.astype(np.uint8), truth.astype(np.uint8), spacing,
                                    case_id, directed_hd=args.directed_hd)
        reports.append(rep)
        log.info("%s: dice ET %.4f WT %.4f TC %.4f", case_id, rep.values["ET"]["dice"],
                 rep.values["WT"]["dice"], rep.values["TC"]["dice"])
    text = metrics.report_json(reports) if args.report == "json" else metrics.report_csv(reports)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = out.with_name(out.name + ".partial")
        tmp.write_text(text)
        os.replace(tmp, out)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args):
    _log_start("gradcheck", args.seed, {"instances": args.instances})
    names = args.only or list(gradcheck.CHECKS)
    unknown = set(names) - set(gradcheck.CHECKS)
    if unknown:
        raise ContractError(f"unknown checks: {sorted(unknown)}")
    failed = []
    for name in names:
        r = gradcheck.run_check(name, args.instances, args.seed)
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:20s} max rel err {r.max_rel_error:.3e} "
              f"({r.instances} instances, {r.coords} coords)")
        if not r.ok:
            failed.append(name)
    if failed:
        raise AcceptanceError(f"gradient checks failed: {', '.join(failed)}")
    return 0


# -- argument parsing ------------------------------------------------------------

def build_parser():
    p = _Parser(prog="tseg", description="Multi-path / multi-branch brain tumour segmentation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="run config JSON with train/network/crop sections")
        sp.add_argument("--threads", type=int, help="kernel threads (results do not depend on it)")
        if seed:
            sp.add_argument("--seed", type=int, help="master seed")

    sp = sub.add_parser("paramcount", help="print per-layer parameter counts")
    common(sp, seed=False)
    sp.add_argument("--json", action="store_true")
    sp.add_argument("--expect-params", type=int,
                    help=f"required total (default {EXPECTED_TOTAL:,} without --config)")
    sp.set_defaults(func=cmd_paramcount)

    sp = sub.add_parser("synth", help="write synthetic phantom cases")
    common(sp)
    sp.add_argument("--n", type=int, default=4)
    sp.add_argument("--out", required=True)
    sp.add_argument("--empty", action="store_true", help="all-background volumes")
    sp.add_argument("--gzip", action="store_true")
    sp.set_defaults(func=cmd_synth, seed=0)

    sp = sub.add_parser("train", help="train a model on a case directory")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="model file to write")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--micro-batch", dest="micro_batch", type=int,
                    help="slices per forward pass; gradients accumulate over the batch")
    sp.add_argument("--batch-slices", dest="batch_slices", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="segment cases with a trained model")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--case", required=True, help="a case directory or a directory of cases")
    sp.add_argument("--out", required=True)
    sp.add_argument("--clamp-to-wt", action="store_true", help="ET/NET votes only inside WT")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="score predictions against ground truth")
    common(sp)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--report", choices=("json", "csv"), default="json")
    sp.add_argument("--out", help="report file (stdout if omitted)")
    sp.add_argument("--directed-hd", action="store_true", help="prediction-to-truth HD95 only")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("gradcheck", help="finite-difference checks of every op")
    common(sp)
    sp.add_argument("--instances", type=int, default=20)
    sp.add_argument("--only", nargs="+", metavar="CHECK")
    sp.set_defaults(func=cmd_gradcheck, seed=0)
    return p


def main(argv=None):
    level = os.environ.get("TSEG_LOG", "INFO").upper()
    logging.basicConfig(level=level if isinstance(logging.getLevelName(level), int) else "INFO",
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        _set_threads(args.threads)
        return args.func(args)
    except TsegError as exc:
        log.error("%s: %s", args.command, exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s: %s", args.command, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
