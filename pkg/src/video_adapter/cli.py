"""Command line front end.

Subcommands: gen-data, train, sample, adapt-sample, eval, serve, oracle-check.

Settings come from three layers with precedence flags > config file > built-in defaults. All
randomness derives from the run seed (``--seed`` or ``[run] seed``): a subcommand hands
``KeyedRng(seed).child(purpose, ...)`` streams to the library, so one number reproduces a run.
Every subcommand writes ``manifest.<subcommand>[.<name>].json`` into the output directory with the echoed
config, the seed and sha256 hashes of every artifact; ``rerun`` in the manifest is an argv that
reproduces the run from the echoed config.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import signal
import sys
import threading
import traceback
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, RunConfig, parse_config, serialize

SUBCOMMANDS = ("gen-data", "train", "sample", "adapt-sample", "eval", "serve", "oracle-check")


class CliError(RuntimeError):
    pass


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _csv(kind):
    def parse(text):
        try:
            return tuple(kind(p.strip()) for p in text.split(",") if p.strip())
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return parse


def _label(text: str):
    if text == "null":
        return None
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("label must be an integer or 'null'") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="video-adapter", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config file ([section] / key = value)")
    common.add_argument("--seed", type=int, help="run seed (overrides [run] seed)")
    common.add_argument("--output-dir", type=Path, help="artifact directory (overrides [run] output_dir)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    g = sub.add_parser("gen-data", parents=[common], help="generate the pretraining and adaptation corpora")
    g.add_argument("--broad-count", type=int)
    g.add_argument("--adapt-count", type=int)

    t = sub.add_parser("train", parents=[common], help="train a denoiser on a dataset file")
    t.add_argument("--role", choices=("pretrained", "adapter"), required=True)
    t.add_argument("--data", type=Path, required=True, help="dataset file (.vads)")
    t.add_argument("--init", type=Path, help="continue from this checkpoint instead of a fresh init")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--name", help="checkpoint file stem (default: the role)")

    def sampling(sp):
        sp.add_argument("--n", type=int, default=16, help="number of clips")
        sp.add_argument("--label", type=_label, default=0, help="dynamics label id, or 'null'")
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--mcmc-steps", type=int)
        sp.add_argument("--mcmc-step-size", type=float)
        sp.add_argument("--name", default="samples", help="output file stem")

    s = sub.add_parser("sample", parents=[common], help="classifier-free-guided sampling from one checkpoint")
    s.add_argument("--checkpoint", type=Path, required=True)
    sampling(s)

    a = sub.add_parser("adapt-sample", parents=[common], help="sample the adapter composed with a prior")
    a.add_argument("--adapter", type=Path, required=True)
    src = a.add_mutually_exclusive_group()
    src.add_argument("--pretrained", type=Path, help="local prior checkpoint")
    src.add_argument("--remote", help="HOST:PORT of a score server holding the prior")
    a.add_argument("--model-id", default="pretrained", help="model id on the score server")
    a.add_argument("--gamma", type=float)
    a.add_argument("--cutoff", type=float, help="composition cutoff fraction")
    a.add_argument("--timeout", type=float)
    sampling(a)

    e = sub.add_parser("eval", parents=[common], help="run the benchmark and write the report")
    e.add_argument("--data-dir", type=Path, help="directory with gen-data outputs (default: generate)")
    e.add_argument("--seeds", type=_csv(int))
    e.add_argument("--n-samples", type=int)
    e.add_argument("--rows", type=_csv(str))
    e.add_argument("--sweep-gammas", type=_csv(float), default=(),
                   help="also sweep the prior strength (first seed) and plot it")
    e.add_argument("--sweep-weights", type=_csv(float), default=(), help="CFG-Mix weights for the sweep")

    v = sub.add_parser("serve", parents=[common], help="serve checkpoints over the score protocol")
    v.add_argument("--model", action="append", default=[], metavar="ID=PATH", required=True)
    v.add_argument("--host")
    v.add_argument("--port", type=int)
    v.add_argument("--duration", type=float, default=0.0, help="stop after this many seconds (0: until signalled)")

    sub.add_parser("oracle-check", parents=[common], help="run the three oracle closure loops")
    return p


# ------------------------------------------------------------------ config layering

def load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config is not None else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace("run", seed=args.seed)
    if args.output_dir is not None:
        cfg = cfg.replace("run", output_dir=str(args.output_dir))
    cmd = args.command
    if cmd == "gen-data":
        if args.broad_count is not None:
            cfg = cfg.replace("broad_data", count=args.broad_count)
        if args.adapt_count is not None:
            cfg = cfg.replace("adapt_data", count=args.adapt_count)
    elif cmd == "train":
        over = {k: getattr(args, a) for k, a in (("steps", "steps"), ("lr", "lr"), ("batch_size", "batch_size"))
                if getattr(args, a) is not None}
        if over:
            cfg = cfg.replace(f"{args.role}_train", **over)
    elif cmd in ("sample", "adapt-sample"):
        over = {k: getattr(args, a) for k, a in (("alpha", "alpha"), ("mcmc_steps", "mcmc_steps"),
                                                  ("mcmc_step_size", "mcmc_step_size"))
                if getattr(args, a) is not None}
        if cmd == "adapt-sample":
            if args.gamma is not None:
                over["gamma"] = args.gamma
            if args.cutoff is not None:
                over["cutoff_fraction"] = args.cutoff
            if args.timeout is not None:
                cfg = cfg.replace("service", timeout=args.timeout)
        if over:
            cfg = cfg.replace("composition", **over)
    elif cmd == "eval":
        if args.seeds is not None:
            cfg = cfg.replace("benchmark", seeds=args.seeds)
        if args.n_samples is not None:
            cfg = cfg.replace("benchmark", n_samples=args.n_samples)
        if args.rows is not None:
            cfg = cfg.replace("benchmark", rows=args.rows)
    elif cmd == "serve":
        if args.host is not None:
            cfg = cfg.replace("service", host=args.host)
        if args.port is not None:
            cfg = cfg.replace("service", port=args.port)
    return cfg


class _Run:
    """Output directory, artifact bookkeeping and the manifest of one invocation."""

    def __init__(self, cfg: RunConfig, command: str, argv, tag: str = ""):
        self.cfg = cfg
        self.command = command
        self.tag = f"{command}.{tag}" if tag else command
        self.argv = list(argv)
        self.out = Path(cfg.run.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: dict = {}
        self.inputs: dict = {}

    def artifact(self, name: str, path) -> Path:
        path = Path(path)
        self.artifacts[name] = {"path": str(path), "sha256": _sha256(path)}
        return path

    def input(self, name: str, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise CliError(f"input {name} not found: {path}")
        self.inputs[name] = {"path": str(path.resolve()), "sha256": _sha256(path)}
        return path

    def write_manifest(self, extra=None) -> Path:
        echo = self.out / f"config.{self.tag}.echo"
        echo.write_text(serialize(self.cfg))
        rerun = _rerun_argv(self.argv, echo)
        manifest = {
            "command": self.command,
            "version": __version__,
            "seed": self.cfg.run.seed,
            "config": self.cfg.to_dict(),
            "config_echo": str(echo),
            "inputs": self.inputs,
            "artifacts": self.artifacts,
            "rerun": rerun,
        }
        if extra:
            manifest.update(extra)
        path = self.out / f"manifest.{self.tag}.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path


def _rerun_argv(argv, echo: Path) -> list:
    """Original argv with ``--config`` pointing at the echo and config-layer flags dropped."""
    drop_with_value = {"--config", "--seed", "--output-dir"}
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        key = tok.split("=", 1)[0]
        if key in drop_with_value:
            skip = "=" not in tok
            continue
        out.append(tok)
    return out[:1] + ["--config", str(echo.resolve())] + out[1:]


def _seed_of(rng, *key) -> int:
    return rng.child(*key).seed % (2**31)


# ------------------------------------------------------------------ subcommands

def cmd_gen_data(args, cfg: RunConfig, run: _Run) -> int:
    from .eval.benchmark import make_corpora
    from .worlds import save_dataset

    pre, atr, ate = make_corpora(cfg)
    data_dir = run.out / "data"
    data_dir.mkdir(exist_ok=True)
    for name, ds in (("pretrain", pre), ("adapt_train", atr), ("adapt_test", ate)):
        path = data_dir / f"{name}.vads"
        save_dataset(ds, path)
        run.artifact(name, path)
        print(f"{name}\t{len(ds)}\t{path}")
    return 0


def cmd_train(args, cfg: RunConfig, run: _Run) -> int:
    from .core_math import KeyedRng
    from .denoiser import init_denoiser, load_checkpoint, save_checkpoint, train_denoiser
    from .worlds import DYNAMICS, load_dataset

    data = load_dataset(run.input("data", args.data))
    sched = cfg.schedule_obj()
    rng = KeyedRng(cfg.run.seed)
    if args.init is not None:
        ckpt = load_checkpoint(run.input("init", args.init))
        if ckpt.sched.summary() != sched.summary():
            raise CliError("the --init checkpoint uses a different schedule than the config")
    else:
        desc = cfg.descriptor(args.role, data.videos.shape[1:], len(DYNAMICS))
        ckpt = init_denoiser(desc, _seed_of(rng, args.role, "init"), sched)
    trained, losses = train_denoiser(ckpt, data, cfg.train_config(args.role, _seed_of(rng, args.role, "train")), sched)
    stem = args.name or args.role
    path = run.out / f"{stem}.vadp"
    save_checkpoint(trained, path)
    run.artifact("checkpoint", path)
    loss_path = run.out / f"{stem}.loss.npy"
    np.save(loss_path, losses)
    run.artifact("loss_curve", loss_path)
    print(f"checkpoint\t{path}\nfinal_loss\t{losses[-min(50, len(losses)):].mean():.6f}")
    return 0


def _condition(args, n):
    from .denoiser import ConditionSpec

    if args.label is None:
        return ConditionSpec.null()
    return ConditionSpec(label_id=np.full(n, args.label, dtype=np.int64))


def _save_samples(run: _Run, stem: str, x: np.ndarray) -> None:
    npy = run.out / f"{stem}.npy"
    np.save(npy, x.astype(np.float32))
    run.artifact("samples", npy)
    png = run.out / f"{stem}.png"
    save_sample_grid(x, png)
    run.artifact("samples_png", png)
    print(f"samples\t{npy}\nfigure\t{png}")


def save_sample_grid(x: np.ndarray, path, max_clips: int = 8) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = np.clip(np.asarray(x), -1, 1)
    n, H = min(max_clips, x.shape[0]), x.shape[1]
    fig, axes = plt.subplots(n, H, figsize=(H * 0.8, n * 0.8), squeeze=False)
    for i in range(n):
        for j in range(H):
            frame = x[i, j]
            axes[i, j].imshow(frame[..., 0] if frame.shape[-1] == 1 else (frame + 1) / 2,
                              vmin=-1, vmax=1, cmap="gray", interpolation="nearest")
            axes[i, j].axis("off")
    fig.tight_layout(pad=0.1)
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)


def _x0_range(cfg: RunConfig):
    return (-1.0, 1.0) if cfg.composition.clip_denoised else None


def cmd_sample(args, cfg: RunConfig, run: _Run) -> int:
    from .adapter import LocalScoreSource, cfg_sample
    from .core_math import KeyedRng
    from .denoiser import load_checkpoint

    ckpt = load_checkpoint(run.input("checkpoint", args.checkpoint))
    comp = cfg.composition
    shape = (args.n,) + ckpt.descriptor.input_shape
    x = cfg_sample(LocalScoreSource(ckpt), comp.alpha, ckpt.sched, shape, _condition(args, args.n),
                   KeyedRng(cfg.run.seed).child("sample"), comp.mcmc_steps, comp.mcmc_step_size,
                   x0_range=_x0_range(cfg))
    _save_samples(run, args.name, x)
    return 0


def cmd_adapt_sample(args, cfg: RunConfig, run: _Run) -> int:
    from .adapter import LocalScoreSource, video_adapter_sample
    from .core_math import KeyedRng
    from .denoiser import load_checkpoint
    from .scorewire import RemoteScoreSource, ScoreClient

    if args.label is None:
        raise CliError("adapt-sample needs a label (the composed prior is label-conditioned)")
    adapter = load_checkpoint(run.input("adapter", args.adapter))
    client = None
    if args.remote:
        host, _, port = args.remote.rpartition(":")
        if not host or not port.isdigit():
            raise CliError("--remote must be HOST:PORT")
        client = ScoreClient(host, int(port), timeout=cfg.service.timeout).connect()
        prior = RemoteScoreSource(client, args.model_id)
    elif args.pretrained is not None:
        prior = LocalScoreSource(load_checkpoint(run.input("pretrained", args.pretrained)))
    else:
        raise CliError("give --pretrained or --remote")
    try:
        shape = (args.n,) + adapter.descriptor.input_shape
        x = video_adapter_sample(LocalScoreSource(adapter), prior, cfg.composition_config(), adapter.sched, shape,
                                 _condition(args, args.n), KeyedRng(cfg.run.seed).child("sample"),
                                 x0_range=_x0_range(cfg))
    finally:
        if client is not None:
            client.close()
    _save_samples(run, args.name, x)
    return 0


def cmd_eval(args, cfg: RunConfig, run: _Run) -> int:
    from .core_math import KeyedRng
    from .eval.benchmark import _train, run_benchmark, weight_sweep, write_report
    from .eval.metrics import FeatureProbe
    from .worlds import load_dataset

    corpora = None
    if args.data_dir is not None:
        corpora = tuple(load_dataset(run.input(name, args.data_dir / f"{name}.vads"))
                        for name in ("pretrain", "adapt_train", "adapt_test"))
    report = run_benchmark(cfg, corpora)
    if args.sweep_gammas or args.sweep_weights:
        from .eval.benchmark import make_corpora

        pre, atr, ate = corpora if corpora is not None else make_corpora(cfg)
        sched = cfg.schedule_obj()
        seed = report.seeds[0]
        p_rng = KeyedRng(cfg.run.seed) if cfg.benchmark.share_pretrained else KeyedRng(seed)
        pretrained = _train(cfg, "pretrained", pre, sched, p_rng).ckpt
        adapter = _train(cfg, "adapter", atr, sched, KeyedRng(seed)).ckpt
        b = cfg.benchmark
        probe = FeatureProbe(ate.videos.shape[-1], b.probe_filters, b.probe_seed)
        report.extras["sweep"] = weight_sweep(adapter, pretrained, ate, sched, cfg.composition_config(),
                                              args.sweep_gammas, args.sweep_weights, b.n_samples, seed, probe)
    paths = write_report(report, run.out / "eval")
    for name in ("table", "json"):
        run.artifact(name, paths[name])
    sys.stdout.write("# benchmark report (tab-separated)\n" + report.to_tsv())
    sys.stdout.write(f"# probe sha256 {report.probe['sha256']}\n")
    for name in ("bar_figure", "sweep_figure"):
        if name in paths:
            print(f"# figure {paths[name]}")
    return 0


def cmd_serve(args, cfg: RunConfig, run: _Run) -> int:
    from .denoiser import load_checkpoint
    from .scorewire import ScoreServer

    models = {}
    for spec in args.model:
        mid, sep, path = spec.partition("=")
        if not sep or not mid:
            raise CliError(f"--model expects ID=PATH, got {spec!r}")
        models[mid] = load_checkpoint(run.input(f"model:{mid}", path))
    server = ScoreServer(models, (cfg.service.host, cfg.service.port))
    done = threading.Event()

    def stop(*_):
        done.set()

    prev = {sig: signal.signal(sig, stop) for sig in (signal.SIGINT, signal.SIGTERM)}
    server.start()
    host, port = server.address
    print(f"listening\t{host}:{port}\tmodels={','.join(sorted(models))}", flush=True)
    run.write_manifest({"address": [host, port]})
    try:
        done.wait(args.duration if args.duration > 0 else None)
    finally:
        server.stop()
        for sig, handler in prev.items():
            signal.signal(sig, handler)
    print("stopped", flush=True)
    return 0


def cmd_oracle_check(args, cfg: RunConfig, run: _Run) -> int:
    from .oracle import closure_checks

    results = closure_checks(cfg.run.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}\t{r.name}\t{r.value:.3e}\t<= {r.tolerance:.0e}")
    path = run.out / "oracle_check.json"
    path.write_text(json.dumps([{"name": r.name, "value": r.value, "tolerance": r.tolerance, "passed": r.passed}
                                for r in results], indent=2))
    run.artifact("results", path)
    return 0 if all(r.passed for r in results) else 1


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "adapt-sample": cmd_adapt_sample,
            "eval": cmd_eval, "serve": cmd_serve, "oracle-check": cmd_oracle_check}


def _module_of(exc: BaseException) -> str:
    """Innermost package module on the traceback, for error attribution."""
    name = "cli"
    for frame in traceback.extract_tb(exc.__traceback__):
        parts = Path(frame.filename).parts
        if "video_adapter" in parts:
            rel = parts[parts.index("video_adapter") + 1:]
            name = ".".join(rel).removesuffix(".py").removesuffix(".__init__")
    return name


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    torch.set_num_threads(1)  # bit-identical float32 results across machines' core counts
    try:
        cfg = load_config(args)
    except (ConfigError, OSError) as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return 2
    try:
        tag = getattr(args, "name", None) or getattr(args, "role", None) or ""
        run = _Run(cfg, args.command, argv, tag)
        code = HANDLERS[args.command](args, cfg, run)
        if args.command != "serve":
            run.write_manifest()
        return code
    except Exception as exc:  # report, do not dump a traceback on operators
        print(f"error [{_module_of(exc)}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
