"""Serve one mask-exchange request from a work directory.

Contract (version 1): the caller writes ``input.nii`` and ``request.json``
into a directory and invokes ``segadapter --workdir <dir>``. The adapter
answers with ``output.nii`` (uint8 labels on the identical grid) and
``response.json``; exit code 0 together with status "ok" signals success,
any failure yields status "error" plus a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .models import AdapterModel, ModelError
from .niftiio import NiftiError, read_nifti, write_labels_like

PROTOCOL_VERSION = 1


def _write_response(workdir: Path, status: str, message: str,
                    labels_emitted) -> None:
    payload = {
        "protocol_version": PROTOCOL_VERSION,
        "status": status,
        "message": message,
        "labels_emitted": list(labels_emitted),
    }
    with open(workdir / "response.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def serve_request(workdir) -> int:
    """Process one request directory; always leaves a response.json behind."""
    workdir = Path(workdir)
    try:
        request_path = workdir / "request.json"
        if not request_path.exists():
            raise ModelError("request.json is missing")
        try:
            with open(request_path, "r", encoding="utf-8") as fh:
                request = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelError(f"request.json is not valid JSON: {exc}")
        version = request.get("protocol_version")
        if version != PROTOCOL_VERSION:
            raise ModelError(f"unsupported protocol_version {version!r}; "
                             f"this adapter speaks {PROTOCOL_VERSION}")
        model_id = request.get("model_id")
        if not model_id:
            raise ModelError("request carries no model_id")

        input_path = workdir / "input.nii"
        if not input_path.exists():
            raise ModelError("input.nii is missing")
        volume = read_nifti(input_path)

        model = AdapterModel.parse(model_id)
        labels = model.segment(volume, request)
        write_labels_like(volume, labels, workdir / "output.nii")
        emitted = sorted(int(v) for v in set(labels.ravel().tolist()) - {0})
        _write_response(workdir, "ok", "", emitted)
        return 0
    except (ModelError, NiftiError) as exc:
        _write_response(workdir, "error", str(exc), [])
        return 1
    except Exception as exc:  # defensive: never die without a response
        _write_response(workdir, "error",
                        f"{type(exc).__name__}: {exc}", [])
        return 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="segadapter",
        description="Reference segmentation backend for the file-based "
                    "mask-exchange protocol")
    parser.add_argument("--workdir", required=True,
                        help="directory holding input.nii + request.json")
    args = parser.parse_args(argv)
    return serve_request(args.workdir)


if __name__ == "__main__":
    sys.exit(main())
