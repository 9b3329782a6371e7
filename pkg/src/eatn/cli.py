"""``eatn`` command line: train, eval, gradcheck, export-attn, costs.

Exit codes: 0 success, 1 gradient check failed, 2 config error,
3 numerical divergence, 4 I/O or corrupted file.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .attnmap import STAGES, export_attention, read_attnmap, render_heatmap
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .costs import count_costs
from .errors import ConfigError, CorruptionError, DivergenceError, GradCheckError, InputError
from .model import EATransformer
from .tensor import no_grad
from .training import TaskSpec, eval_set, evaluate, grad_check, run_training, task_loss
from .training.tasks import generate

log = logging.getLogger("eatn")

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4


def _load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig({"preset": args.preset or "lite"})
    if getattr(args, "preset", None) and args.config:
        raw = cfg.to_dict()
        raw["preset"] = args.preset
        cfg = RunConfig(raw)
    return cfg.apply_overrides(
        alpha=getattr(args, "alpha", None), beta=getattr(args, "beta", None),
        kernel=getattr(args, "kernel", None), no_conv=getattr(args, "no_conv", False),
        no_skip=getattr(args, "no_skip", False), steps=getattr(args, "steps", None),
        seed=getattr(args, "seed", None))


def cmd_train(args):
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    cfg.dump(os.path.join(args.out, "config.effective.json"))
    task, spec = cfg.task_spec(), cfg.model_spec()
    opts = cfg.train_options()

    def progress(rec):
        if args.verbose and rec["step"] % max(1, opts.steps // 10 or 1) == 0:
            log.info("step %d loss %.4f acc %.4f lr %.2e", rec["step"], rec["loss"], rec["accuracy"], rec["lr"])

    run = run_training(task, spec, cfg.optimizer_state(), cfg.schedule(), opts.steps, cfg.seed,
                       opts, on_step=progress)
    ckpt = os.path.join(args.out, "checkpoint.eatn")
    save_checkpoint(run.model, ckpt)
    # final metrics describe the saved (float32) artifact, so eval reproduces them
    run.final.update(evaluate(load_checkpoint(ckpt), task, opts.eval_size, cfg.seed))
    run.write(args.out)
    print(json.dumps(run.final, sort_keys=True))
    return EXIT_OK


def _check_compatible(spec, task):
    problems = []
    if task.is_seq2seq:
        if spec.kind != "seq2seq":
            problems.append(f"task {task.kind} needs a seq2seq model, checkpoint is {spec.kind}")
        elif task.vocab != spec.src_vocab or task.vocab != spec.tgt_vocab:
            problems.append(f"task vocab {task.vocab} vs model vocab {spec.src_vocab}/{spec.tgt_vocab}")
    elif task.kind == "parity_classify":
        if spec.kind != "encoder_classifier" or task.vocab != spec.src_vocab or task.n_classes != spec.n_classes:
            problems.append("parity task does not match checkpoint vocabulary/classes")
    else:
        if spec.kind != "image_classifier" or tuple(task.grid) != tuple(spec.image_shape[:2]) \
                or task.n_classes != spec.n_classes:
            problems.append("image task does not match checkpoint grid/classes")
    if task.kind != "synthetic_shapes_image" and task.seq_len > spec.max_len:
        problems.append(f"task seq_len {task.seq_len} exceeds model max_len {spec.max_len}")
    if problems:
        raise ConfigError("; ".join(problems), "task")


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    cfg = _load_config(args)
    task = cfg.task_spec()
    _check_compatible(model.spec, task)
    n = args.n or cfg.train_options().eval_size
    metrics = evaluate(model, task, n, cfg.seed)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def gradcheck_config(cfg, flip_sign=None):
    """Run the finite-difference gate on the architecture ``cfg`` describes."""
    task, spec = cfg.task_spec(), cfg.model_spec()
    opts = cfg.gradcheck_options()
    ls = cfg.train_options().label_smoothing

    def sampler(rng):
        return generate(task, opts["batch_size"], [cfg.seed, 11])

    def builder():
        model = EATransformer.init(spec, cfg.seed)
        rng = np.random.default_rng([cfg.seed, 7])
        for p in model.params.values():
            # move off unit gains and exactly-zero biases
            p.data += opts["jitter"] * rng.standard_normal(p.shape)
        return model.params, lambda batch: task_loss(model, batch, ls)

    hook = None
    if flip_sign:
        def hook(name, g):
            return -g if name == flip_sign else g
    return grad_check(builder, sampler, tolerance=opts["tolerance"], n_coords=opts["n_coords"],
                      seed=cfg.seed, grad_hook=hook, raise_on_fail=False)


def cmd_gradcheck(args):
    cfg = _load_config(args)
    report = gradcheck_config(cfg, args.flip_sign)
    for line in report.lines():
        print(line)
    status = "PASS" if report.passed else "FAIL"
    print(f"{status} max_rel_error={report.max_rel_error:.3e} tolerance={report.tolerance:g}")
    if not report.passed:
        for bad in report.failures:
            print(f"failed tensor {bad.name} at {bad.worst_coord}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def _default_task(spec):
    if spec.kind == "seq2seq":
        return TaskSpec(kind="copy", vocab=spec.src_vocab, seq_len=spec.max_len)
    if spec.kind == "encoder_classifier":
        return TaskSpec(kind="parity_classify", vocab=spec.src_vocab, seq_len=spec.max_len,
                        n_classes=spec.n_classes)
    H, W, _ = spec.image_shape
    return TaskSpec(kind="synthetic_shapes_image", grid=(H, W), n_classes=spec.n_classes)


def cmd_export_attn(args):
    model = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = RunConfig.load(args.config)
        task, seed = cfg.task_spec(), cfg.seed
        _check_compatible(model.spec, task)
    else:
        task, seed = _default_task(model.spec), 0
    seed = args.seed if args.seed is not None else seed
    x, y = eval_set(task, args.sample + 1, seed)
    trace = []
    with no_grad():
        model.forward(x[args.sample : args.sample + 1], y[args.sample : args.sample + 1], trace=trace)
    layers = None if args.layers is None else {int(v) for v in args.layers.split(",")}
    stages = None if args.stages is None else args.stages.split(",")
    paths = export_attention(trace, args.out, layers, stages)
    for p in paths:
        print(p)
        if args.heatmaps:
            m = read_attnmap(p)
            for h in range(m.n_heads):
                out = p[: -len(".atnm")] + f"_head{h}.pgm"
                render_heatmap(m, h, out)
                print(out)
    return EXIT_OK


def cmd_costs(args):
    cfg = _load_config(args)
    spec = cfg.model_spec()
    seq_len = args.seq_len or cfg.task_spec().seq_len
    report = count_costs(spec, seq_len)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        print(report.table())
    return EXIT_OK


def _add_config_args(p, overrides=True):
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--preset", choices=["lite", "base"], help="named preset (default lite when no config)")
    p.add_argument("--seed", type=int)
    if overrides:
        p.add_argument("--alpha", type=float, help="skip-connection weight for every attention type")
        p.add_argument("--beta", type=float, help="convolution blend weight for every attention type")
        p.add_argument("--kernel", type=int, help="attention convolution kernel size (1, 3 or 5)")
        p.add_argument("--no-conv", action="store_true", help="drop the attention convolutions")
        p.add_argument("--no-skip", action="store_true", help="drop the attention skip connections")


def build_parser():
    parser = argparse.ArgumentParser(prog="eatn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"eatn {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + logs")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on fresh seeded data")
    p.add_argument("checkpoint")
    _add_config_args(p, overrides=False)
    p.add_argument("-n", type=int, help="number of evaluation examples")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the configured architecture")
    _add_config_args(p)
    p.add_argument("--flip-sign", metavar="TENSOR", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-attn", help="export attention maps (.atnm) and heatmaps (.pgm)")
    p.add_argument("checkpoint")
    p.add_argument("--config", help="run config describing the input task")
    p.add_argument("--seed", type=int)
    p.add_argument("--sample", type=int, default=0, help="index into the seeded evaluation set")
    p.add_argument("--out", required=True)
    p.add_argument("--layers", help="comma-separated attention instance indices")
    p.add_argument("--stages", help=f"comma-separated subset of {','.join(STAGES)}")
    p.add_argument("--heatmaps", action="store_true", help="also write one PGM per head")
    p.set_defaults(func=cmd_export_attn)

    p = sub.add_parser("costs", help="print parameter and FLOP accounting")
    _add_config_args(p)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_costs)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CorruptionError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except (InputError, GradCheckError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
