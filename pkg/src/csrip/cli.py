"""``csrip`` command line: prepare-data, train-prior, train-sr, evaluate, ablate, hallucinate.

Exit codes: 0 success, 2 usage or input error, 3 runtime failure (divergence).
"""
import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock
from PIL import Image, PngImagePlugin

from . import data, evaluation
from .ablation import run_ablation
from .checkpoint import CheckpointError, config_hash, load_checkpoint, save_checkpoint
from .config import load_config
from .network import NetworkConfig, build_network
from .prior import build_prior
from .training import (ABLATION_ROWS, SCALE_INPUT_SIZE, SCALES, TrainingDiverged,
                       train_prior, train_sr, write_history_csv)

log = logging.getLogger("csrip")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
SPLITS = ("train", "val", "test")


class UsageError(Exception):
    """Bad input on the user's side; maps to exit code 2."""


# ---------------------------------------------------------------------------
# layout and hashes

def row_slug(row):
    return row.lower().replace("+", "_")


def cache_dir(cfg, split):
    return Path(cfg.output_dir) / "cache" / split


def prior_path(cfg, scale):
    return Path(cfg.output_dir) / "priors" / f"prior_{scale}.pt"


def sr_dir(cfg, row):
    return Path(cfg.output_dir) / "sr" / row_slug(row)


def hashed_config(cfg):
    return {k: v for k, v in cfg.to_dict().items() if k != "output_dir"}


def prior_section_hash(cfg):
    keys = [k for k in cfg.to_dict() if k.startswith("prior_")] + ["seed"]
    return config_hash({k: getattr(cfg, k) for k in keys})


def data_hash(cfg):
    """Fingerprint of every input that shapes the prepared cache."""
    h = hashlib.sha256()
    for key in ("train_manifest", "test_manifest"):
        manifest = cfg.resolve(key)
        if not manifest.is_file():
            raise FileNotFoundError(f"manifest not found: {manifest}")
        h.update(manifest.read_bytes())
        for rel, _ in data.read_manifest(manifest):
            p = Path(cfg.data_root) / rel
            h.update(rel.encode())
            h.update(p.read_bytes() if p.is_file() else b"<missing>")
    h.update(json.dumps({"degradation": data.degradation_params(), "hr_size": data.HR_SIZE,
                         "seed": cfg.data_seed, "ratio": cfg.train_ratio},
                        sort_keys=True).encode())
    return h.hexdigest()[:16]


def _stamp(cfg):
    return {"config_hash": cfg.hash(), "profile": cfg.profile}


def _csv_with_stamp(text, cfg_hash):
    return f"# config_hash={cfg_hash}\n" + text


# ---------------------------------------------------------------------------
# cache access

def load_split(cfg, split):
    d = cache_dir(cfg, split)
    if not (d / "index.json").is_file():
        raise UsageError(f"prepared data not found at {d}; run `csrip prepare-data` first")
    return data.read_cache(d)


def load_splits(cfg, splits=SPLITS):
    out, hashes = {}, set()
    for split in splits:
        quads, index = load_split(cfg, split)
        out[split] = (quads, index)
        hashes.add(index.get("data_hash"))
    if len(hashes) != 1:
        raise UsageError("cached splits come from different data hashes; re-run prepare-data")
    return out, hashes.pop()


# ---------------------------------------------------------------------------
# commands

def cmd_prepare_data(cfg, args):
    dhash = data_hash(cfg)
    out = Path(cfg.output_dir) / "cache"
    out.mkdir(parents=True, exist_ok=True)
    with FileLock(str(out / ".lock")):
        try:
            if all(data.read_cache_index(out / s).get("data_hash") == dhash for s in SPLITS):
                print(f"cache up to date ({dhash})")
                return EXIT_OK
        except (FileNotFoundError, ValueError):
            pass
        train_all = data.load_dataset(cfg.data_root, cfg.resolve("train_manifest"), "train")
        test = data.load_dataset(cfg.data_root, cfg.resolve("test_manifest"), "test")
        evaluation.check_identity_disjoint(train_all.identity_names, test.identity_names)
        train, val = data.split_identity_stratified(train_all, cfg.train_ratio, cfg.data_seed)
        for split, ds in (("train", train), ("val", val), ("test", test)):
            quads = data.build_quadruplets(ds)
            data.write_cache(out / split, quads, ds.num_classes, ds.identity_names, cfg.data_seed,
                             extra={"data_hash": dhash, "split": split,
                                    "skipped": [str(s) for s in ds.skipped],
                                    "content_hash": data.hash_arrays(
                                        [a for q in quads for a in (q.lr, q.x2, q.x4, q.hr)])})
            print(f"{split}: {len(quads)} quadruplets, {ds.num_classes} identities"
                  + (f", {len(ds.skipped)} unreadable skipped" if ds.skipped else ""))
    print(f"cache written to {out} ({dhash})")
    return EXIT_OK


def cmd_train_prior(cfg, args):
    splits, dhash = load_splits(cfg, ("train", "val"))
    train_q, index = splits["train"]
    val_q, _ = splits["val"]
    num_classes = index["num_classes"]
    scales = SCALES if args.scale == "all" else (args.scale,)
    schedule = cfg.prior_schedule()
    for scale in scales:
        size = SCALE_INPUT_SIZE[scale]
        model = build_prior(size, num_classes, cfg.prior_width_multiplier, cfg.seed)
        path = prior_path(cfg, scale)
        path.parent.mkdir(parents=True, exist_ok=True)
        model, history = train_prior(
            model, [(q.hr, q.identity) for q in train_q], [(q.hr, q.identity) for q in val_q],
            schedule, seed=cfg.seed,
            progress=lambda r, s=scale: log.info(
                "prior %s epoch %d lr %.3g loss %.4f acc %.3f val_acc %.3f", s, r["epoch"],
                r["lr"], r["train_loss"], r["train_acc"], r["val_acc"]))
        write_history_csv(path.with_name(f"prior_{scale}_history.csv"), history)
        best = max(history, key=lambda r: r["val_acc"])
        meta = {"scale": scale, "input_size": size, "num_classes": num_classes,
                "width_multiplier": cfg.prior_width_multiplier, "data_hash": dhash,
                "prior_hash": prior_section_hash(cfg), "epochs": len(history),
                "best_val_acc": best["val_acc"], **_stamp(cfg)}
        save_checkpoint(path, "prior", model.state_dict(), hashed_config(cfg), meta=meta)
        path.with_name(f"prior_{scale}_summary.txt").write_text(
            "".join(f"{k}: {v}\n" for k, v in meta.items()))
        print(f"prior {scale}: {len(history)} epochs, best val rank-1 {best['val_acc']:.4f}, "
              f"train rank-1 {history[-1]['train_acc']:.4f} -> {path}")
    return EXIT_OK


def load_priors(cfg, dhash, num_classes):
    expected = [prior_path(cfg, s) for s in SCALES]
    missing = [p for p in expected if not p.is_file()]
    if missing:
        raise UsageError(
            "identity priors are required for this loss configuration; missing "
            + ", ".join(str(p) for p in missing)
            + ". Expected checkpoints: " + ", ".join(p.name for p in expected)
            + ". Run `csrip train-prior --scale all` first.")
    priors, section = {}, set()
    for scale, path in zip(SCALES, expected):
        payload = load_checkpoint(path, kind="prior", scale=scale)
        meta = payload["meta"]
        if meta["data_hash"] != dhash:
            raise UsageError(f"{path} was trained on different data ({meta['data_hash']} != {dhash})")
        if meta["num_classes"] != num_classes:
            raise UsageError(f"{path} has {meta['num_classes']} classes, data has {num_classes}")
        section.add(meta["prior_hash"])
        model = build_prior(meta["input_size"], meta["num_classes"], meta["width_multiplier"])
        model.load_state_dict(payload["model"])
        priors[scale] = model.freeze()
    if len(section) != 1:
        raise UsageError("prior checkpoints come from different configurations; "
                         "retrain them together with `csrip train-prior --scale all`")
    return priors


def _train_subset(cfg, quads):
    limit = cfg.sr_train_limit
    if not limit or limit >= len(quads):
        return quads
    step = max(1, len(quads) // limit)
    return quads[::step][:limit]


def cmd_train_sr(cfg, args):
    row = args.row or cfg.loss_row
    cfg.loss_row = row
    cascaded, loss_cfg = ABLATION_ROWS[row]
    splits, dhash = load_splits(cfg, ("train", "val"))
    train_q = _train_subset(cfg, splits["train"][0])
    val_q = splits["val"][0]
    priors = load_priors(cfg, dhash, splits["train"][1]["num_classes"]) if loss_cfg.identity else None
    net = build_network(cfg.network(cascaded), cfg.seed)
    out = sr_dir(cfg, row)
    out.mkdir(parents=True, exist_ok=True)
    state_path = out / "state.pt"
    resume = None
    if args.resume:
        if not state_path.is_file():
            raise UsageError(f"nothing to resume: {state_path} not found")
        resume = load_checkpoint(state_path, kind="sr_train", expected_config_hash=cfg.hash())
    net, history, state = train_sr(
        net, train_q, val_q, cfg.sr_schedule(), loss_cfg, priors, cfg.alpha, seed=cfg.seed,
        log_path=out / "train_log.csv", checkpoint_path=state_path, resume=resume,
        config=hashed_config(cfg),
        progress=lambda r: log.info("sr %s epoch %d lr %.3g val_ssim %.4f val_psnr %.3f",
                                    row, r["epoch"], r["lr"], r["val_ssim"], r["val_psnr"]))
    write_history_csv(out / "history.csv", history)
    best = max(history, key=lambda r: r["val_ssim"]) if history else {}
    meta = {"row": row, "network": net.config.to_dict(), "data_hash": dhash,
            "epochs": len(history), "train_images": len(train_q),
            "best_val_ssim": best.get("val_ssim"), "best_val_psnr": best.get("val_psnr"),
            **_stamp(cfg)}
    if priors:
        meta["prior_hash"] = prior_section_hash(cfg)
    save_checkpoint(out / "model.pt", "sr_network", net.state_dict(), hashed_config(cfg), meta=meta)
    (out / "summary.txt").write_text("".join(f"{k}: {v}\n" for k, v in meta.items()))
    print(f"train-sr {row}: {len(history)} epochs, best val SSIM {best.get('val_ssim', float('nan')):.4f}"
          f" -> {out / 'model.pt'}")
    return EXIT_OK


def load_sr_model(path):
    payload = load_checkpoint(path, kind="sr_network")
    net = build_network(NetworkConfig(**payload["meta"]["network"]))
    net.load_state_dict(payload["model"])
    net.eval()
    return net, payload


def _write_report(report, out, stem, cfg_hash):
    report.to_csv(out / f"{stem}.csv")
    report.to_json(out / f"{stem}.json")
    for metric, curve in report.csd().items():
        (out / f"{stem}_csd_{metric.lower()}.csv").write_text(
            _csv_with_stamp(curve.to_csv(), cfg_hash))


def cmd_evaluate(cfg, args):
    row = args.row or cfg.loss_row
    ckpt = Path(args.checkpoint) if args.checkpoint else sr_dir(cfg, row) / "model.pt"
    net, payload = load_sr_model(ckpt)
    splits, dhash = load_splits(cfg, ("train", "test"))
    if payload["meta"].get("data_hash") != dhash:
        raise UsageError(f"{ckpt} was trained on data {payload['meta'].get('data_hash')}, "
                         f"but the prepared cache is {dhash}")
    test_q, test_index = splits["test"]
    train_index = splits["train"][1]
    model_hash = payload["config_hash"]
    report = evaluation.evaluate_model(
        net, test_q, train_index["identity_names"], test_index["identity_names"],
        model_id=f"{payload['meta']['row']}:{payload['content_hash'][:12]}",
        dataset_id=dhash, config_hash=model_hash)
    bicubic = evaluation.evaluate_bicubic(test_q, model_id="bicubic", dataset_id=dhash,
                                          config_hash=model_hash)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "eval" / row_slug(payload["meta"]["row"])
    out.mkdir(parents=True, exist_ok=True)
    _write_report(report, out, "report", model_hash)
    _write_report(bicubic, out, "bicubic", model_hash)
    curves = {m: {payload["meta"]["row"]: report.csd()[m], "bicubic": bicubic.csd()[m]}
              for m in ("PSNR", "SSIM")}
    evaluation.plot_csd(curves, out / "csd.png", metadata={"config_hash": model_hash})
    print(f"{payload['meta']['row']}: mean PSNR {report.mean_psnr:.3f} dB, mean SSIM "
          f"{report.mean_ssim:.4f} ({report.infinite_psnr_count} infinite PSNR excluded)")
    print(f"bicubic: mean PSNR {bicubic.mean_psnr:.3f} dB, mean SSIM {bicubic.mean_ssim:.4f}")
    print(f"reports written to {out}")
    return EXIT_OK


def cmd_ablate(cfg, args):
    splits, dhash = load_splits(cfg)
    train_q = _train_subset(cfg, splits["train"][0])
    rows = args.rows.split(",") if args.rows else list(ABLATION_ROWS)
    for r in rows:
        if r not in ABLATION_ROWS:
            raise UsageError(f"unknown ablation row {r!r}; choose from {list(ABLATION_ROWS)}")
    priors = None
    if any(ABLATION_ROWS[r][1].identity for r in rows):
        priors = load_priors(cfg, dhash, splits["train"][1]["num_classes"])
    table = run_ablation(train_q, splits["val"][0], splits["test"][0], cfg.ablation_seeds,
                         cfg.network(), cfg.sr_schedule(), priors, cfg.alpha, rows,
                         config_hash=cfg.hash(),
                         progress=lambda r, s, sc, err: log.info("ablation %s seed %s: %s", r, s,
                                                                 sc if err is None else err))
    out = Path(cfg.output_dir) / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "ablation.csv")
    table.to_json(out / "ablation.json")
    for r in table.summary():
        print(f"{r['row']:<10} PSNR {r['mean_psnr']:.3f}  SSIM {r['mean_ssim']:.4f}  {r['status']}")
    return EXIT_OK


def _read_lr(path, strict):
    img = Image.open(path).convert("RGB")
    if img.size == (data.LR_SIZE, data.LR_SIZE):
        return np.asarray(img, dtype=np.float64).transpose(2, 0, 1)
    if strict:
        raise UsageError(f"{path} is {img.size[0]}x{img.size[1]}; --strict requires "
                         f"{data.LR_SIZE}x{data.LR_SIZE}")
    log.warning("%s is %dx%d; resizing to %d and degrading to %dx%d", path, *img.size,
                data.HR_SIZE, data.LR_SIZE, data.LR_SIZE)
    hr = data.load_image(path)
    for _ in range(3):
        hr = data.degrade_step(hr)
    return hr


def _save_png(arr, path, cfg_hash):
    info = PngImagePlugin.PngInfo()
    info.add_text("config_hash", cfg_hash)
    img = np.clip(np.rint(np.asarray(arr)), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(img).save(path, pnginfo=info)


@torch.no_grad()
def cmd_hallucinate(cfg, args):
    net, payload = load_sr_model(Path(args.checkpoint))
    lr = _read_lr(args.input, args.strict)
    out = Path(args.output) if args.output else Path(args.input).with_name(
        Path(args.input).stem + "_sr8x.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    x = torch.as_tensor(lr, dtype=torch.float32).unsqueeze(0)
    if args.intermediates and not net.config.cascaded:
        raise UsageError("--intermediates needs a cascaded model")
    outs = net(x, intermediates=True) if net.config.cascaded else None
    final = (outs.sr8x if outs is not None else net(x))[0].double().numpy()
    if args.enhance:
        final = evaluation.sharpen(final)
    h = payload["config_hash"]
    _save_png(final, out, h)
    written = [out]
    if args.intermediates:
        for tag, t in (("sr2x", outs.sr2x), ("sr4x", outs.sr4x)):
            p = out.with_name(out.stem.replace("_sr8x", "") + f"_{tag}.png")
            _save_png(t[0].double().numpy(), p, h)
            written.append(p)
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML key/value configuration file")
    common.add_argument("--profile", choices=("desk", "paper"), help="preset (default: desk)")
    common.add_argument("--seed", type=int, help="training seed")
    common.add_argument("--max-epochs", type=int, help="epoch budget for this command's training")
    common.add_argument("--width-multiplier", type=float, help="SR network width multiplier")
    common.add_argument("--output-dir", help="artifact root")
    common.add_argument("--data-root", help="dataset root containing the manifests")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="csrip", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare-data", parents=[common], help="build the quadruplet cache")
    tp = sub.add_parser("train-prior", parents=[common], help="stage 1: identity priors")
    tp.add_argument("--scale", choices=(*SCALES, "all"), default="all")
    ts = sub.add_parser("train-sr", parents=[common], help="stage 2: SR network")
    ts.add_argument("--row", choices=list(ABLATION_ROWS), help="loss configuration")
    ts.add_argument("--resume", action="store_true", help="continue from the last epoch checkpoint")
    ev = sub.add_parser("evaluate", parents=[common], help="score a model on the test split")
    ev.add_argument("--row", choices=list(ABLATION_ROWS))
    ev.add_argument("--checkpoint", help="SR checkpoint (default: the row's model.pt)")
    ev.add_argument("--out", help="report directory")
    ab = sub.add_parser("ablate", parents=[common], help="train and score the ablation ladder")
    ab.add_argument("--rows", help="comma-separated subset of rows")
    ha = sub.add_parser("hallucinate", parents=[common], help="super-resolve one image")
    ha.add_argument("--checkpoint", required=True)
    ha.add_argument("--input", required=True)
    ha.add_argument("--output")
    ha.add_argument("--strict", action="store_true", help="refuse inputs that are not 24x24")
    ha.add_argument("--enhance", action="store_true", help="apply 3x3 sharpening to the output")
    ha.add_argument("--intermediates", action="store_true", help="also write 48x48 and 96x96 outputs")
    return p


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train-prior": cmd_train_prior,
    "train-sr": cmd_train_sr,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "hallucinate": cmd_hallucinate,
}


def _config_from_args(args):
    overrides = {"seed": args.seed, "width_multiplier": args.width_multiplier,
                 "output_dir": args.output_dir, "data_root": args.data_root}
    if args.max_epochs is not None:
        key = "prior_max_epochs" if args.command == "train-prior" else "sr_max_epochs"
        overrides[key] = args.max_epochs
    return load_config(args.config, args.profile, overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _config_from_args(args)
        return COMMANDS[args.command](cfg, args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UsageError, FileNotFoundError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
