"""
Main entry point for the weak-segmentation toolkit
One sub-command per step: gen-data, gen-labels, train, infer, eval, estep-debug
"""

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from models import (Boxes, ConfigError, DataError, ImageLevel, InvalidInputError,
                    Sample, Strong, UndefinedMetricError, argmax_labels)
from segmentation.bboxlabels import bbox_rect, bbox_seg
from segmentation.data import LabelRemap, derive_annotations, generate, join_datasets
from segmentation.estep import (AdaptParams, bbox_bias_map, em_adapt_biases,
                                em_fixed_biases)
from segmentation.evaluation import evaluate_pairs, format_iou_table, mean_iou
from segmentation.net import forward, init_params, replace_classifier
from segmentation.train import StepRecord, estep_dispatch, predict, run_training
from utils.checkpoint_manager import CheckpointManager, ExportManager
from utils.config import RunConfig, format_config, load_config, write_resolved_config
from utils.dataset_io import (GROUNDTRUTH_NAME, MANIFEST_NAME, read_dataset,
                              read_num_labels, write_dataset, write_label_map)

logger = logging.getLogger("weakseg")

CHECKPOINT_NAME = "checkpoint.wseg"
METRICS_NAME = "metrics"
PREDICTIONS_NAME = "predictions.txt"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors"""

    def error(self, message):
        raise ConfigError(message)


def setup_logging(verbose: bool = False):
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "weakseg", False):
            root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler.weakseg = True
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _parallel_map(fn, items: Sequence, threads: int) -> List:
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(fn, items))


def _require_num_labels(manifest: str) -> int:
    num_labels = read_num_labels(manifest)
    if num_labels is None:
        raise DataError(f"{manifest} has no num_labels header")
    return num_labels


def parse_label_map(text: str) -> Dict[int, Optional[int]]:
    """'1:1,2:4,3:-' -> {1: 1, 2: 4, 3: None}; '-' drops the class"""
    mapping: Dict[int, Optional[int]] = {}
    for item in filter(None, (part.strip() for part in text.split(","))):
        try:
            src, dst = item.split(":")
            mapping[int(src)] = None if dst.strip() == "-" else int(dst)
        except ValueError:
            raise ConfigError(f"Bad label mapping '{item}' (expected src:dst or src:-)")
    return mapping


# ==================== COMMANDS ====================

def cmd_gen_data(args, cfg: RunConfig) -> int:
    """Synthetic dataset, or the union of remapped datasets with --join"""
    if args.join:
        return _join_data(args, cfg)
    gen = cfg.gen_config()
    samples = generate(gen, args.prefix)
    derived = derive_annotations(samples, args.annotation, gen.num_labels, args.strong_count)
    write_dataset(derived, cfg.out, gen.num_labels)
    return EXIT_OK


def _join_data(args, cfg: RunConfig) -> int:
    sources = []
    for entry in args.join:
        manifest, _, mapping = entry.partition("@")
        source_labels = _require_num_labels(manifest)
        sources.append((read_dataset(manifest), source_labels,
                        parse_label_map(mapping) if mapping else None))

    num_labels = args.num_labels
    if num_labels is None:
        num_labels = 1
        for _, source_labels, mapping in sources:
            targets = [source_labels - 1] if mapping is None else [t for t in mapping.values() if t]
            num_labels = max(num_labels, max(targets, default=0) + 1)

    parts = []
    for dataset, source_labels, mapping in sources:
        if mapping is None:
            mapping = {label: label for label in range(source_labels)}
        parts.append((dataset, LabelRemap(mapping, num_labels)))
    joined = join_datasets(parts)
    write_dataset(joined, cfg.out, num_labels)
    logger.info("joined %d datasets into %d labels", len(parts), num_labels)
    return EXIT_OK


def cmd_gen_labels(args, cfg: RunConfig) -> int:
    """Bbox-Rect or Bbox-Seg label maps for every box sample, written as a strong dataset"""
    num_labels = _require_num_labels(args.data)
    dataset = read_dataset(args.data)
    seg_cfg = cfg.bbox_seg_config()

    def derive(sample: Sample) -> Sample:
        annotation = sample.annotation
        if not isinstance(annotation, Boxes):
            return sample
        if args.method == "bbox-rect":
            label_map = bbox_rect(annotation.boxes, sample.height, sample.width)
        else:
            label_map = bbox_seg(sample.image, annotation.boxes, seg_cfg, num_labels)
        return sample.with_annotation(Strong(label_map))

    derived = _parallel_map(derive, dataset, cfg.threads)
    write_dataset(derived, cfg.out, num_labels, write_groundtruth=False)

    truth_path = os.path.join(os.path.dirname(os.path.abspath(args.data)), GROUNDTRUTH_NAME)
    if os.path.exists(truth_path):
        truth = {s.id: s.annotation.label_map for s in read_dataset(truth_path)}
        pairs = [(truth[s.id], s.annotation.label_map) for s in derived if s.id in truth]
        if pairs:
            cm = evaluate_pairs(pairs, num_labels, cfg.eval.void_label)
            per_class, mean = mean_iou(cm)
            logger.info("%s labels vs ground truth: mIOU %.4f", args.method, mean)
            print(format_iou_table(per_class, mean, cm.pixel_accuracy()))
    return EXIT_OK


def _load_initial(path: str, num_labels: int, seed: int):
    params = CheckpointManager(path).load()
    if params.config.num_labels != num_labels:
        logger.info("checkpoint predicts %d labels, task has %d: replacing the classifier",
                    params.config.num_labels, num_labels)
        params = replace_classifier(params, num_labels, seed)
    return params


def cmd_train(args, cfg: RunConfig) -> int:
    num_labels = _require_num_labels(args.data)
    dataset = read_dataset(args.data)
    val_set = read_dataset(args.val) if args.val else None
    train_cfg = cfg.train_config(num_labels)
    initial = None
    if args.init_checkpoint:
        initial = _load_initial(args.init_checkpoint, num_labels, cfg.seed)
        train_cfg = replace(train_cfg, net=initial.config)

    write_resolved_config(cfg)
    exports = ExportManager(cfg.out)
    exports.start_metrics_log(METRICS_NAME)

    def record(step: StepRecord):
        exports.append_metrics(step.step, step.loss, step.miou, step.lr, METRICS_NAME)

    params, log = run_training(dataset, train_cfg, val_set, cfg.threads, initial, on_step=record)
    checkpoints = CheckpointManager(os.path.join(cfg.out, CHECKPOINT_NAME))
    checkpoints.save(params)
    info = checkpoints.get_checkpoint_info()
    logger.info("saved %s: %d labels, %d parameters, %d bytes",
                info["path"], info["num_labels"], info["parameters"], info["size"])
    if log.final_miou is not None:
        logger.info("final mIOU %.4f raw, %.4f with CRF", log.final_miou, log.final_miou_crf)
    return EXIT_OK


def cmd_infer(args, cfg: RunConfig) -> int:
    params = CheckpointManager(args.checkpoint).load()
    dataset = read_dataset(args.data, params.config.num_labels)
    crf = cfg.crf if cfg.eval.crf else None
    predictions = _parallel_map(lambda s: predict(params, s.image, crf), dataset, cfg.threads)
    samples = [Sample(s.image, Strong(p), s.id) for s, p in zip(dataset, predictions)]
    write_resolved_config(cfg)
    write_dataset(samples, cfg.out, params.config.num_labels,
                  manifest_name=PREDICTIONS_NAME, write_groundtruth=False)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    num_labels = _require_num_labels(args.gt)
    truth = read_dataset(args.gt)
    for sample in truth:
        if not isinstance(sample.annotation, Strong):
            raise DataError(f"Ground-truth sample {sample.id} is not strongly annotated")

    if args.pred:
        predicted = {s.id: s for s in read_dataset(args.pred, num_labels)}
        missing = [s.id for s in truth if s.id not in predicted]
        if missing:
            raise DataError(f"No prediction for {len(missing)} samples (first: {missing[0]})")
        for sample in predicted.values():
            if not isinstance(sample.annotation, Strong):
                raise DataError(f"Prediction {sample.id} is not a label map")
        predictions = [predicted[s.id].annotation.label_map for s in truth]
    elif args.checkpoint:
        params = CheckpointManager(args.checkpoint).load()
        crf = cfg.crf if cfg.eval.crf else None
        predictions = _parallel_map(lambda s: predict(params, s.image, crf), truth, cfg.threads)
    else:
        raise ConfigError("eval needs --pred or --checkpoint")

    pairs = [(s.annotation.label_map, p) for s, p in zip(truth, predictions)]
    cm = evaluate_pairs(pairs, num_labels, cfg.eval.void_label)
    per_class, mean = mean_iou(cm)
    print(format_iou_table(per_class, mean, cm.pixel_accuracy()))
    if args.csv:
        path = ExportManager(cfg.out).export_iou_to_csv(per_class, mean)
        logger.info("IOU table written to %s", path)
    return EXIT_OK


def cmd_estep_debug(args, cfg: RunConfig) -> int:
    """Scores, biases and the E-step label map of one sample"""
    num_labels = _require_num_labels(args.data)
    dataset = read_dataset(args.data)
    matches = [s for s in dataset if args.id is None or s.id == args.id]
    if not matches:
        raise DataError(f"No sample '{args.id}' in {args.data}")
    sample = matches[0]

    if args.checkpoint:
        params = _load_initial(args.checkpoint, num_labels, cfg.seed)
    else:
        params = init_params(cfg.net_config(num_labels))
    scores = forward(params, sample.image)

    train_cfg = cfg.train_config(num_labels)
    if args.mode in ("em-fixed", "em-adapt"):
        if not isinstance(sample.annotation, ImageLevel):
            raise ConfigError(f"Mode {args.mode} needs an image-level sample, {sample.id} is {sample.kind}")
        weak = sample.annotation.weak
        if args.mode == "em-fixed":
            biases = em_fixed_biases(weak, cfg.estep.b_fg, cfg.estep.b_bg).values
        else:
            biases = em_adapt_biases(scores, weak,
                                     AdaptParams(cfg.estep.rho_fg, cfg.estep.rho_bg, cfg.seed)).values
        train_cfg = replace(train_cfg, image_mode=args.mode)
    else:
        if not isinstance(sample.annotation, Boxes):
            raise ConfigError(f"Mode {args.mode} needs a box sample, {sample.id} is {sample.kind}")
        bias_map = bbox_bias_map(sample.annotation.boxes, sample.height, sample.width,
                                 num_labels, cfg.estep.b_fg, cfg.estep.b_bg)
        biases = bias_map.reshape(-1, num_labels).max(axis=0)
        train_cfg = replace(train_cfg, box_mode=args.mode)

    target, _ = estep_dispatch(scores, sample, train_cfg, visit_seed=cfg.seed)
    raw = argmax_labels(scores)

    os.makedirs(cfg.out, exist_ok=True)
    np.save(os.path.join(cfg.out, f"{sample.id}_scores.npy"), scores.data)
    np.save(os.path.join(cfg.out, f"{sample.id}_biases.npy"), np.asarray(biases))
    write_label_map(os.path.join(cfg.out, f"{sample.id}_estep.pgm"), target)
    write_label_map(os.path.join(cfg.out, f"{sample.id}_argmax.pgm"), raw)

    counts = np.bincount(target.labels.ravel(), minlength=num_labels)
    raw_counts = np.bincount(raw.labels.ravel(), minlength=num_labels)
    print("label  bias        argmax  estep")
    for label in range(num_labels):
        print(f"{label:<6} {biases[label]:<11.5g} {raw_counts[label]:<7d} {counts[label]}")
    return EXIT_OK


# ==================== ARGUMENTS ====================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, help="worker threads")
    common.add_argument("--out", help="output directory")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = _Parser(prog="weakseg", description="Weakly/semi-supervised segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--annotation", choices=["strong", "weak", "boxes"], default="strong")
    p.add_argument("--strong-count", type=int, default=0,
                   help="leading samples that stay strongly annotated")
    p.add_argument("--num-images", type=int)
    p.add_argument("--prefix", default="img", help="sample id prefix")
    p.add_argument("--join", action="append", default=[], metavar="MANIFEST[@SRC:DST,...]",
                   help="remap and merge existing datasets instead of generating")
    p.add_argument("--num-labels", type=int, help="label count of the joined dataset")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gen-labels", parents=[common], help="estimate label maps from boxes")
    p.add_argument("--data", required=True, help="boxes manifest")
    p.add_argument("--method", choices=["bbox-rect", "bbox-seg"], default="bbox-seg")
    p.add_argument("--alpha", type=float, help="Bbox-Seg centre fraction")
    p.set_defaults(func=cmd_gen_labels)

    p = sub.add_parser("train", parents=[common], help="train a network with hard EM")
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--val", help="strongly annotated validation manifest")
    p.add_argument("--weak-mode", choices=["em-fixed", "em-adapt"])
    p.add_argument("--box-mode", choices=["bbox-rect", "bbox-seg", "bbox-em-fixed"])
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--strong-per-batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--init-checkpoint", help="start from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="predict label maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--crf", action="store_true", help="refine with the dense CRF")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="IOU of predictions against ground truth")
    p.add_argument("--gt", required=True, help="strongly annotated manifest")
    p.add_argument("--pred", help="prediction manifest")
    p.add_argument("--checkpoint", help="predict with this checkpoint instead of --pred")
    p.add_argument("--crf", action="store_true")
    p.add_argument("--void-label", type=int)
    p.add_argument("--csv", action="store_true", help="also write iou.csv to --out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("estep-debug", parents=[common], help="inspect one E-step")
    p.add_argument("--data", required=True)
    p.add_argument("--id", help="sample id (default: first sample)")
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=["em-fixed", "em-adapt", "bbox-em-fixed"], default="em-adapt")
    p.set_defaults(func=cmd_estep_debug)
    return parser


def _flag_values(args) -> Dict[str, object]:
    names = {
        "seed": "seed", "threads": "threads", "out": "out",
        "num_images": "gen.num_images", "alpha": "bbox_seg.alpha",
        "weak_mode": "train.image_mode", "box_mode": "train.box_mode",
        "steps": "train.steps", "batch_size": "train.batch_size",
        "strong_per_batch": "train.strong_per_batch", "lr": "train.lr",
        "void_label": "eval.void_label",
    }
    values = {key: getattr(args, attr) for attr, key in names.items() if hasattr(args, attr)}
    if getattr(args, "crf", False):
        values["eval.crf"] = True
    return values


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, resolve the config, run one command; returns the exit code"""
    try:
        args = build_parser().parse_args(argv)
        setup_logging(args.verbose)
        cfg = load_config(args.config, args.set, _flag_values(args))
        sys.stderr.write("# resolved config\n" + format_config(cfg))
        return args.func(args, cfg)
    except ConfigError as e:
        logger.error("config error: %s", e)
        return EXIT_CONFIG
    except (DataError, InvalidInputError, UndefinedMetricError) as e:
        logger.error("data error: %s", e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
