"""Command-line entry point: ``egomotion <command> [options]``.

Commands: gen-data, train, distill, register-identity, infer, eval, bench, selftest.

Global flags ``--seed``, ``--precision {32,64}``, ``--threads N`` and
``--config FILE`` go before the command.  The config file is YAML; see
``configs/desk.yaml`` in the repository for a commented example.
Command-line flags override file values.  Every command logs its fully
resolved configuration and writes it next to its outputs.
"""
from __future__ import annotations

import argparse
import copy
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import yaml

DATA_ENV = "EGOMOTION_DATA"
COMMANDS = ("gen-data", "train", "distill", "register-identity", "infer", "eval", "bench", "selftest")
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("egomotion")


# -- configuration ---------------------------------------------------------------------------
@dataclass
class RunConfig:
    command: str = ""
    seed: int = 0
    precision: int = 32
    scale: str = "desk"                                    # denoiser size preset: desk or full
    paths: dict = field(default_factory=dict)              # data, out, model, teacher, ...
    data: dict = field(default_factory=dict)               # gen-data sizes
    schedule: dict = field(default_factory=dict)           # DiffusionSchedule fields
    denoiser: dict = field(default_factory=dict)           # DenoiserConfig overrides
    train: dict = field(default_factory=dict)              # TrainConfig fields
    rig: dict = field(default_factory=dict)                # RigConfig fields
    identity: dict = field(default_factory=dict)           # registration settings

    DATA_KEYS = ("identities", "seqs", "frames", "fps")
    IDENTITY_KEYS = ("poses", "views", "iterations", "lam_reg", "lam_height")

    def __post_init__(self):
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        if self.scale not in ("desk", "full"):
            raise ValueError(f"scale must be desk or full, got {self.scale!r}")
        for name, allowed in (("data", self.DATA_KEYS), ("identity", self.IDENTITY_KEYS)):
            unknown = set(getattr(self, name)) - set(allowed)
            if unknown:
                raise ValueError(f"unknown {name} config keys: {sorted(unknown)}")
        # validate the module sections against their own dataclasses
        from .denoiser import DenoiserConfig
        from .diffusion import DiffusionSchedule
        from .observe import RigConfig
        from .train import TrainConfig
        for name, cls in (("schedule", DiffusionSchedule), ("rig", RigConfig), ("train", TrainConfig)):
            unknown = set(getattr(self, name)) - {f.name for f in fields(cls) if f.init}
            if unknown:
                raise ValueError(f"unknown {name} config keys: {sorted(unknown)}")
        unknown = set(self.denoiser) - {f.name for f in fields(DenoiserConfig)} - {"part", "role"}
        if unknown:
            raise ValueError(f"unknown denoiser config keys: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def to_dict(self):
        return asdict(self)

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    # -- resolved module configs -------------------------------------------------------------
    def schedule_obj(self):
        from .diffusion import DiffusionSchedule
        return DiffusionSchedule(**self.schedule)

    def rig_obj(self):
        from .observe import RigConfig
        rig = dict(self.rig)
        if "image_size" in rig:
            rig["image_size"] = tuple(rig["image_size"])
        return RigConfig(**rig)

    def train_obj(self, **extra):
        from .train import TrainConfig
        return TrainConfig.from_dict({"seed": self.seed, **self.train, **extra})

    def denoiser_obj(self, part, role, **extra):
        from .denoiser import DenoiserConfig
        over = {k: v for k, v in self.denoiser.items() if k not in ("part", "role")}
        over = {"precision": self.precision, "seed": self.seed, **over, **extra}
        return DenoiserConfig.preset(part, role, self.scale, **over)


def resolve_config(args) -> RunConfig:
    """Config file, then explicit global flags, then command-specific paths."""
    base = {}
    if args.config:
        with open(args.config) as fh:
            base = yaml.safe_load(fh) or {}
    cfg = RunConfig.from_dict(base)
    cfg = copy.deepcopy(cfg)
    cfg.command = args.command
    if args.seed is not None:
        cfg.seed = args.seed
    if args.precision is not None:
        cfg.precision = args.precision
    for key in ("data", "out", "model", "teacher", "input", "pred", "gt", "report", "identity_file"):
        val = getattr(args, key, None)
        if val is not None:
            cfg.paths[key] = str(val)
    if "data" not in cfg.paths and os.environ.get(DATA_ENV):
        cfg.paths["data"] = os.environ[DATA_ENV]
    if getattr(args, "steps_train", None) is not None:
        cfg.train["steps"] = args.steps_train
    RunConfig.from_dict(cfg.to_dict())        # re-validate after overrides
    return cfg


def _need(cfg: RunConfig, key, flag=None):
    if key not in cfg.paths:
        hint = f" (or set {DATA_ENV})" if key == "data" else ""
        raise SystemExit(f"error: {cfg.command} needs --{flag or key}{hint}")
    return cfg.paths[key]


def _write_config(cfg: RunConfig, directory):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "run_config.yaml"), "w") as fh:
        fh.write(cfg.dump())


# -- commands --------------------------------------------------------------------------------
def cmd_gen_data(cfg: RunConfig, args):
    from .observe import generate_dataset, write_dataset
    out = _need(cfg, "out")
    d = {"identities": [40, 5, 5], "seqs": 20, "frames": 200, "fps": 30.0, **cfg.data}
    splits = generate_dataset(tuple(d["identities"]), d["seqs"], d["frames"], cfg.seed, d["fps"], cfg.rig_obj())
    write_dataset(out, splits)
    _write_config(cfg, out)
    log.info("wrote %s", ", ".join(f"{k}: {len(v)} sequences" for k, v in splits.items()))
    return 0


def _records(cfg, split, limit=None):
    from .observe import read_split
    return read_split(_need(cfg, "data"), split, limit)


def _write_meta(out, mode, body_steps, hand_steps, schedule):
    meta = {"mode": mode, "body_steps": body_steps, "hand_steps": hand_steps, "schedule": schedule.to_dict()}
    with open(os.path.join(out, "estimator.yaml"), "w") as fh:
        yaml.safe_dump(meta, fh, sort_keys=True)


def cmd_train(cfg: RunConfig, args):
    from .train import train_teacher
    out = _need(cfg, "out")
    records = _records(cfg, "train", args.limit)
    schedule = cfg.schedule_obj()
    tcfg = cfg.train_obj()
    parts = {"all": ["body", "hand"], "whole": ["whole"]}.get(args.part, [args.part])
    if args.mode == "regression" and "whole" in parts:
        raise SystemExit("error: the regression variant uses separate body and hand models")
    _write_config(cfg, out)
    for part in parts:
        upper = part == "hand" and args.hand_conditioning == "cascaded"
        dcfg = cfg.denoiser_obj(part, "teacher", upper_body=upper)
        log.info("training %s %s model for %d steps", part, args.mode, tcfg.steps)
        res = train_teacher(records, dcfg, tcfg, schedule, mode=args.mode)
        res.net.save(os.path.join(out, part))
        with open(os.path.join(out, f"{part}_curve.txt"), "w") as fh:
            fh.write(res.table())
        log.info("%s final %s", part, res.log[-1][1].as_dict() if res.log else {})
    if args.mode == "regression":
        mode = "regression"
    elif args.part == "whole":
        mode = "parallel-joint"
    else:
        mode = "cascaded" if args.hand_conditioning == "cascaded" else "separate"
    _write_meta(out, mode, 10, 10, schedule)
    return 0


def cmd_distill(cfg: RunConfig, args):
    from .cascade import WholeBodyEstimator
    from .train import sds_distill
    out = _need(cfg, "out")
    teacher = WholeBodyEstimator.load(_need(cfg, "teacher"))
    if teacher.mode not in ("cascaded", "separate"):
        raise SystemExit(f"error: cannot distill a {teacher.mode} estimator")
    records = _records(cfg, "train", args.limit)
    tcfg = cfg.train_obj()
    _write_config(cfg, out)
    for net in teacher.nets:
        c = net.config
        scfg = cfg.denoiser_obj(c.part, "student", upper_body=c.upper_body, identity=c.identity)
        log.info("distilling %s student for %d steps", c.part, tcfg.steps)
        res = sds_distill(net, scfg, records, tcfg, teacher.schedule, distill=not args.no_distill)
        res.net.save(os.path.join(out, c.part))
        with open(os.path.join(out, f"{c.part}_curve.txt"), "w") as fh:
            fh.write(res.table())
    _write_meta(out, teacher.mode, 1, 1, teacher.schedule)
    return 0


def cmd_register(cfg: RunConfig, args):
    import numpy as np
    from .identity import angle_prior, register_identity
    from .observe import render_static_views, static_poses, static_view_cameras
    out = _need(cfg, "out")
    settings = {"poses": 10, "views": 3, "iterations": 3000, "lam_reg": 300.0, "lam_height": 1.0, **cfg.identity}
    records = _records(cfg, args.split)
    match = [r for r in records if r.identity.id == args.identity]
    if not match:
        raise SystemExit(f"error: identity {args.identity!r} not found in split {args.split!r}")
    ident = match[0].identity
    poses = static_poses(ident, cfg.seed, settings["poses"])
    cams = static_view_cameras(settings["views"])
    kp2d, vis = render_static_views(poses, cams)
    train = _records(cfg, "train", args.limit)
    prior = register_identity(kp2d, vis, cams, ident.height, iterations=settings["iterations"],
                              lam_reg=settings["lam_reg"], lam_height=settings["lam_height"],
                              angle_mean=angle_prior(train) if train else None)
    prior.save(out)
    if prior.bone_scale is not None:
        err = np.abs(prior.bone_scale / ident.bone_scale - 1.0).max()
        log.info("registered %s: max bone-scale error %.2f %%", ident.id, 100 * err)
    return 0


def _load_estimator(cfg, args):
    from .cascade import WholeBodyEstimator
    over = {}
    if getattr(args, "steps", None) is not None:
        over = {"body_steps": args.steps, "hand_steps": args.steps}
    est = WholeBodyEstimator.load(_need(cfg, "model"), **over)
    if getattr(args, "mode", None) and est.mode != args.mode:
        raise SystemExit(f"error: checkpoint holds a {est.mode} estimator, not {args.mode}")
    return est


def _identity_prior(cfg):
    from .identity import IdentityPrior
    path = cfg.paths.get("identity_file")
    return IdentityPrior.load(path) if path else None


def cmd_infer(cfg: RunConfig, args):
    import numpy as np
    from .eval import latency_stats
    from .gradcore import checkpoint
    from .observe import make_identity, make_record
    est = _load_estimator(cfg, args)
    out = _need(cfg, "out")
    prior = _identity_prior(cfg)
    source = _need(cfg, "input")
    if source == "live":
        rec = make_record(make_identity("live", cfg.seed), cfg.seed, args.frames, rig=cfg.rig_obj())
        session = est.stream(cfg.seed, prior)
        frames = np.stack([session.push(rec.observation.slice(t, t + 1)) for t in range(len(rec.observation))])
        lat = latency_stats(session.latency_ms[min(20, len(session.latency_ms) - 1):])
    else:
        from .observe import read_split
        rec = read_split(source, args.split)[args.index]
        import time
        start = time.perf_counter()
        frames = est.estimate(rec.observation, cfg.seed, prior).frames
        per_frame = 1000.0 * (time.perf_counter() - start) / len(frames)
        lat = latency_stats([per_frame])
    checkpoint.save(out, {"motion": frames})
    text = "latency (ms per frame): " + ", ".join(f"{k} {v:.3f}" for k, v in lat.items()) + "\n"
    with open(os.path.splitext(out)[0] + "_latency.txt", "w") as fh:
        fh.write(text)
    print(text, end="")
    return 0


def _motion_file(path):
    from .gradcore import checkpoint
    return checkpoint.load(path)["motion"]


def cmd_eval(cfg: RunConfig, args):
    from .eval import EvalReport, part_metrics, run_ablation
    report_path = _need(cfg, "report")
    if "pred" in cfg.paths:
        report = EvalReport()
        report.add(os.path.basename(cfg.paths["pred"]), "file",
                   part_metrics(_motion_file(cfg.paths["pred"]), _motion_file(_need(cfg, "gt"))))
    else:
        records = _records(cfg, args.split, args.limit)
        report = run_ablation({os.path.basename(os.path.normpath(_need(cfg, "model"))): cfg.paths["model"]},
                              records, seeds=(cfg.seed,), n_evals=args.evals, split=args.split)
    report.save(report_path)
    print(report.to_text(), end="")
    return 0


def cmd_bench(cfg: RunConfig, args):
    from .cascade import WholeBodyEstimator
    from .eval import EvalReport, bench_latency, bench_stream
    from .observe import make_identity, make_record
    est = _load_estimator(cfg, args)
    prior = _identity_prior(cfg)
    obs = make_record(make_identity("bench", cfg.seed), cfg.seed, args.frames, rig=cfg.rig_obj()).observation
    report = EvalReport()
    if "teacher" in cfg.paths:
        res = bench_latency(WholeBodyEstimator.load(cfg.paths["teacher"]), est, obs, args.warmup)
        report.latency.update(res)
    else:
        report.latency["stream"] = bench_stream(est, obs, args.warmup, cfg.seed, prior)
    if "report" in cfg.paths:
        report.save(cfg.paths["report"])
    print(report.to_text(), end="")
    return 0


def cmd_selftest(cfg: RunConfig, args):
    from .selftest import run_all
    failed = 0
    for name, ok, detail in run_all(cfg.seed):
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += not ok
    return 1 if failed else 0


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "distill": cmd_distill, "register-identity": cmd_register,
    "infer": cmd_infer, "eval": cmd_eval, "bench": cmd_bench, "selftest": cmd_selftest,
}


# -- argument parsing ------------------------------------------------------------------------
def build_parser():
    p = argparse.ArgumentParser(prog="egomotion", description="Egocentric whole-body motion estimation.")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--precision", type=int, choices=(32, 64), default=None)
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (default: library default)")
    p.add_argument("--config", default=None, help="YAML RunConfig file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command")

    g = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train teacher or regression models")
    t.add_argument("--part", choices=("body", "hand", "all", "whole"), default="all")
    t.add_argument("--mode", choices=("diffusion", "regression"), default="diffusion")
    t.add_argument("--hand-conditioning", choices=("cascaded", "separate"), default="cascaded")
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", dest="steps_train", type=int)
    t.add_argument("--limit", type=int, help="use only the first N training sequences")

    d = sub.add_parser("distill", help="distill one-step students from a teacher estimator")
    d.add_argument("--teacher", required=True)
    d.add_argument("--data")
    d.add_argument("--out", required=True)
    d.add_argument("--steps", dest="steps_train", type=int)
    d.add_argument("--limit", type=int)
    d.add_argument("--no-distill", action="store_true", help="train the student without the teacher term")

    r = sub.add_parser("register-identity", help="fit an identity prior from multi-view static poses")
    r.add_argument("--identity", required=True, help="identity id, e.g. id045")
    r.add_argument("--split", default="test")
    r.add_argument("--data")
    r.add_argument("--out", required=True)
    r.add_argument("--limit", type=int, default=20, help="training sequences for the angle prior")

    i = sub.add_parser("infer", help="estimate whole-body motion")
    i.add_argument("--model", required=True)
    i.add_argument("--input", required=True, help="dataset directory or 'live'")
    i.add_argument("--split", default="test")
    i.add_argument("--index", type=int, default=0)
    i.add_argument("--frames", type=int, default=300, help="live stream length")
    i.add_argument("--mode", choices=("cascaded", "separate", "parallel-joint", "regression"))
    i.add_argument("--steps", type=int)
    i.add_argument("--identity", dest="identity_file")
    i.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="metrics for a prediction file or a model on a split")
    e.add_argument("--pred")
    e.add_argument("--gt")
    e.add_argument("--model")
    e.add_argument("--data")
    e.add_argument("--split", default="test")
    e.add_argument("--limit", type=int)
    e.add_argument("--evals", type=int, default=5)
    e.add_argument("--report", required=True)

    b = sub.add_parser("bench", help="per-frame latency")
    b.add_argument("--model", required=True)
    b.add_argument("--teacher")
    b.add_argument("--frames", type=int, default=1000)
    b.add_argument("--warmup", type=int, default=20)
    b.add_argument("--identity", dest="identity_file")
    b.add_argument("--report")

    sub.add_parser("selftest", help="run the cross-module oracle checks")
    return p


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    if args.threads is not None:
        # only effective when the BLAS library has not been loaded yet (fresh process)
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)
    try:
        cfg = resolve_config(args)
    except (OSError, ValueError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    log.info("resolved config:\n%s", cfg.dump())
    try:
        return HANDLERS[args.command](cfg, args)
    except SystemExit as exc:
        print(exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
