"""ndexport command line: export-backbone, export-dataset, export-bank."""

from __future__ import annotations

import argparse
import sys

from .datasets import export_bank, export_cifar10, export_mnist
from .formats import ExportError
from .resnet import IMAGENET_MEAN, IMAGENET_STD, ExportJob, export_backbone


def _floats3(text: str):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated values")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ndexport",
                                description="torch checkpoints and archives -> engine files")
    sub = p.add_subparsers(dest="command", required=True)

    pb = sub.add_parser("export-backbone",
                        help="ResNet-18 checkpoint -> manifest + ZWB + parity record")
    pb.add_argument("--checkpoint", help="torch checkpoint path (omit for fresh init)")
    pb.add_argument("--out", required=True, help="output directory")
    pb.add_argument("--input-size", type=int, default=224, dest="input_size")
    pb.add_argument("--mean", type=_floats3, default=IMAGENET_MEAN)
    pb.add_argument("--std", type=_floats3, default=IMAGENET_STD)
    pb.add_argument("--source-id", default="", dest="source_id")
    pb.set_defaults(func=_cmd_backbone)

    pd = sub.add_parser("export-dataset", help="dataset archive -> IDX/ZTB files")
    pd.add_argument("--kind", required=True, choices=("mnist", "cifar10"))
    pd.add_argument("--archive", required=True,
                    help="mnist: directory with the 4 .gz files; cifar10: tar or dir of .bin")
    pd.add_argument("--out", required=True)
    pd.set_defaults(func=_cmd_dataset)

    pk = sub.add_parser("export-bank", help="precompute a ZTB feature bank in torch")
    pk.add_argument("--backbone-dir", required=True, dest="backbone_dir",
                    help="directory written by export-backbone")
    pk.add_argument("--images", required=True)
    pk.add_argument("--tag", required=True)
    pk.add_argument("--batch", type=int, default=64)
    pk.add_argument("--out", required=True)
    pk.set_defaults(func=_cmd_bank)
    return p


def _cmd_backbone(args) -> int:
    job = ExportJob(checkpoint=args.checkpoint, out_dir=args.out,
                    input_size=args.input_size, mean=args.mean, std=args.std,
                    source_id=args.source_id)
    record = export_backbone(job)
    print(f"exported backbone {record['backbone_hash']} to {args.out} "
          f"(parity record parity.json)")
    return 0


def _cmd_dataset(args) -> int:
    if args.kind == "mnist":
        files = export_mnist(args.archive, args.out)
    else:
        files = export_cifar10(args.archive, args.out)
    print("wrote:\n  " + "\n  ".join(files))
    return 0


def _cmd_bank(args) -> int:
    out = export_bank(args.backbone_dir, args.images, args.out,
                      dataset_tag=args.tag, batch=args.batch)
    print(f"wrote bank {out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
