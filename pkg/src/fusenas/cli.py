"""Command-line entry point: ``fusenas <command> ...``.

Exit codes: 0 success, 1 invalid input, 2 failed numerical check.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import checks
from . import degrade as dg
from . import metrics as mt
from . import model as md
from . import trainer as tr
from .fusion import load_architecture, save_architecture

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

SYNTH_SETS = {"B": "Test-B", "N": "Test-N", "L": "Test-L", "BN": "Test-BN", "BNL": "Test-BNL"}


class InputError(Exception):
    """Raised by commands when arguments or files fail validation."""


class _Parser(argparse.ArgumentParser):
    # usage errors are validation failures; exit code 2 is reserved for numerical checks
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise InputError(f"{what} is not a directory: {p}")
    return p


def _parse_label(text: str) -> list[float]:
    bits = text.replace(",", "")
    if len(bits) != 3 or set(bits) - {"0", "1"}:
        raise InputError(f"--label wants three bits such as 1,0,1; got {text!r}")
    return [float(b) for b in bits]


def _config(args) -> tr.TrainConfig:
    if args.config is not None:
        _require_file(args.config, "config file")
    return tr.load_train_config(args.config, {"seed": args.seed})


def _progress(every: int):
    def report(it, comps):
        if (it + 1) % every == 0:
            print(f"iter {it + 1} loss {comps['total']:.5f}", flush=True)
    return report


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    _require_dir(args.clean_dir, "--clean-dir")
    if args.count is not None and args.count <= 0:
        raise InputError("--count must be positive")
    if args.testset == "train":
        records = dg.build_trainset(args.clean_dir, args.out, args.seed, args.count)
    else:
        records = dg.build_testset(SYNTH_SETS[args.testset], args.clean_dir, args.out, args.seed, args.count)
    print(f"wrote {len(records)} pairs to {Path(args.out) / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    _require_file(args.data, "--data manifest")
    cfg = _config(args)
    data = tr.load_pairs(args.data, n_variants=0)
    want = torch.tensor(tr.TASK_LABELS[args.task], dtype=torch.float32)
    keep = [i for i in range(len(data)) if torch.equal(data.labels[i], want)]
    if not keep:
        raise InputError(f"manifest has no samples with the {args.task} label {tr.TASK_LABELS[args.task]}")
    mc = tr.model_config_for(cfg)
    enc, log = tr.pretrain_encoder(args.task, data.subset(keep), cfg, mc)
    conf = {"encoder": {"task": args.task, "in_ch": 6 + mc.iden_ch, "width": mc.enc_width, "ch": mc.enc_ch},
            "train": asdict(cfg)}
    digest = md.save_checkpoint(args.out, enc, conf, "encoder")
    if log:
        print(f"final loss {log[-1]['total']:.5f}")
    print(f"saved {args.out} sha256 {digest}")
    return EXIT_OK


def cmd_search(args) -> int:
    _require_file(args.data, "--data manifest")
    cfg = _config(args)
    data = tr.load_pairs(args.data)
    model, genotype, log = tr.search(data, cfg)
    md.save_checkpoint(args.out, model, {**md.restorer_config(model), "train": asdict(cfg)}, "restorer")
    save_architecture(genotype, args.arch_out)
    if args.curve:
        tr.write_curve(args.curve, log)
    print(f"saved {args.out} and {args.arch_out}")
    return EXIT_OK


def _load_encoder(path) -> tuple[str, dict]:
    tensors, meta = md.read_checkpoint(_require_file(path, "--encoders checkpoint"))
    if meta.get("kind") != "encoder":
        raise InputError(f"{path} is a {meta.get('kind')!r} checkpoint, not an encoder")
    return meta["config"]["encoder"]["task"], tensors


def cmd_train(args) -> int:
    _require_file(args.data, "--data manifest")
    cfg = _config(args)
    kw = {}
    if args.arch is not None:
        specs = load_architecture(_require_file(args.arch, "--arch file"))
        kw["genotype"] = ([[asdict(b) for b in cell] for cell in specs] if specs and isinstance(specs[0], list)
                          else [asdict(b) for b in specs])
    encoders = dict(_load_encoder(p) for p in args.encoders or [])
    data = tr.load_pairs(args.data)
    out = Path(args.out)
    model, log = tr.train_final(data, cfg, tr.model_config_for(cfg, **kw), encoders,
                                out_dir=out.parent if cfg.checkpoint_every else None,
                                progress=_progress(args.log_every))
    digest = md.save_checkpoint(out, model, {**md.restorer_config(model), "train": asdict(cfg)}, "restorer")
    if args.curve:
        tr.write_curve(args.curve, log)
    print(f"saved {out} sha256 {digest}")
    return EXIT_OK


def _input_images(path: Path) -> list[Path]:
    if path.is_dir():
        files = dg.list_images(path)
        if not files:
            raise InputError(f"no images in {path}")
        return files
    return [_require_file(path, "--input")]


def cmd_restore(args) -> int:
    _require_file(args.ckpt, "--ckpt")
    files = _input_images(Path(args.input))
    model, _ = md.load_restorer(args.ckpt)
    model.eval()
    clean_set = None
    if args.identity_dir is not None:
        clean_set = [dg.read_image(p) for p in _input_images(_require_dir(args.identity_dir, "--identity-dir"))]
        if len({c.shape for c in clean_set}) != 1:
            raise InputError("identity images must share one size")
    classifier = md.load_classifier(_require_file(args.classifier, "--classifier")) if args.classifier else None
    fixed = _parse_label(args.label) if args.label else None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in files:
        img = dg.read_image(path)
        h, w = img.shape[:2]
        if h % 8 or w % 8:
            raise InputError(f"{path}: height and width must be multiples of 8, got {h}x{w}")
        y = md.to_tensor(img)
        if fixed is not None:
            c_hat = torch.tensor([fixed])
        elif classifier is not None:
            c_hat = torch.as_tensor(tr.predict_labels(classifier, y), dtype=torch.float32)
        else:
            c_hat = torch.ones(1, 3)
        iden = md.identity_info(img, clean_set) if clean_set else None
        out = tr.restore_batch(model, y, c_hat, iden)
        dg.write_image(out_dir / f"{path.stem}.png", md.to_image(out)[0])
    print(f"restored {len(files)} image(s) into {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    records = dg.read_manifest(_require_file(args.pairs, "--pairs manifest"))
    restored = _require_dir(args.restored, "--restored")
    if not records:
        raise InputError(f"{args.pairs} has no records")
    rows = []
    for rec in records:
        path = _require_file(restored / f"{rec['id']}.png", "restored image")
        out, ref = dg.read_image(path), dg.read_image(rec["clean_path"])
        if out.shape != ref.shape:
            raise InputError(f"{path}: shape {out.shape} does not match clean image {ref.shape}")
        rows.append((rec["id"], out, ref))
    summary = mt.write_report(args.report, rows)
    print(f"mean PSNR {summary['psnr_db']:.2f} dB  SSIM {summary['ssim']:.4f} over {len(rows)} pairs")
    return EXIT_OK


def cmd_classify_train(args) -> int:
    _require_file(args.data, "--data manifest")
    cfg = _config(args)
    data = tr.load_pairs(args.data, n_variants=0)
    net, log = tr.train_classifier(data, cfg, args.width)
    md.save_checkpoint(args.out, net, {"classifier": {"width": args.width}, "train": asdict(cfg)}, "classifier")
    acc = float(np.mean(np.all(tr.predict_labels(net, data.degraded) == data.labels.numpy(), axis=1)))
    print(f"saved {args.out}; training exact-match accuracy {acc:.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        results = checks.run_suite(args.op, seed=args.seed)
    except KeyError as exc:
        raise InputError(str(exc.args[0])) from exc
    failed = 0
    for name, err in results.items():
        ok = err < checks.TOLERANCE
        failed += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name:32s} {err:.3e}")
    print(f"{len(results) - failed}/{len(results)} passed (tolerance {checks.TOLERANCE:g})")
    return EXIT_NUMERIC if failed else EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fusenas", description="Joint face restoration toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="degrade clean images into a pair set with a manifest")
    s.add_argument("--clean-dir", required=True)
    s.add_argument("--testset", required=True, choices=[*SYNTH_SETS, "train"])
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=None, help="use only the first N clean images")
    s.set_defaults(func=cmd_synth)

    def training(name, func, help):
        q = sub.add_parser(name, help=help)
        q.add_argument("--data", required=True, help="pair manifest written by synth")
        q.add_argument("--config", default=None, help="key = value file; missing keys use the desk preset")
        q.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        q.add_argument("--out", required=True)
        q.set_defaults(func=func)
        return q

    q = training("pretrain", cmd_pretrain, "pretrain one task encoder")
    q.add_argument("--task", required=True, choices=list(tr.TASK_LABELS))

    q = training("search", cmd_search, "alternating architecture search")
    q.add_argument("--arch-out", required=True)
    q.add_argument("--curve", default=None, help="optional JSONL loss curve")

    q = training("train", cmd_train, "train the restorer")
    q.add_argument("--arch", default=None, help="derived architecture from search")
    q.add_argument("--encoders", nargs="*", default=None, help="pretrained encoder checkpoints")
    q.add_argument("--curve", default=None, help="optional JSONL loss curve")
    q.add_argument("--log-every", type=int, default=100)

    q = training("classify-train", cmd_classify_train, "train the degradation classifier")
    q.add_argument("--width", type=int, default=16)

    r = sub.add_parser("restore", help="restore one image or a directory of images")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--identity-dir", default=None)
    r.add_argument("--classifier", default=None, help="classifier checkpoint used to predict labels")
    r.add_argument("--label", default=None, help="fixed label bits b,n,l (default 1,1,1 without a classifier)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_restore)

    e = sub.add_parser("eval", help="score restored images against their clean references")
    e.add_argument("--pairs", required=True)
    e.add_argument("--restored", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--op", default=None, help="only cases whose name contains this string")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    threads = os.environ.get("FUSENAS_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
