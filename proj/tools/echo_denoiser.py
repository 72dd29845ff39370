#!/usr/bin/env python3
"""Reference external denoiser for the line-delimited JSON protocol.

Implements a trivial deterministic model: each queried position gets a
distribution peaked on a token derived from the position and the number of
committed cells. Serves as a protocol integration target and as a template
for adapters that wrap a real model.

Protocol (one JSON object per line, stdin -> stdout):
  {"v":1,"hello":true}                            -> {"v":1,"descriptor":{...}}
  {"v":1,"prompt":[...],"cells":[...],"query":[...]} -> {"v":1,"preds":[...]}
  anything else                                   -> {"v":1,"error":"..."}
"""
import json
import sys

VOCAB = 32
MASK_ID = 0
EOS_ID = 1
PEAK = 0.8


def descriptor():
    return {
        "vocab": VOCAB,
        "mask_id": MASK_ID,
        "eos_id": EOS_ID,
        "hidden_dim": None,
        "deterministic": True,
    }


def predict(req):
    cells = req["cells"]
    committed = sum(1 for c in cells if c is not None)
    preds = []
    for pos in req["query"]:
        tok = 2 + (pos * 7 + committed) % (VOCAB - 2)
        rest = (1.0 - PEAK) / (VOCAB - 2)
        topk = [[tok, PEAK]] + [[t, rest] for t in range(1, VOCAB) if t != tok]
        preds.append({"pos": pos, "topk": topk, "tail": 0.0})
    return preds


def main():
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
            if req.get("v") != 1:
                reply = {"v": 1, "error": "unsupported protocol version"}
            elif req.get("hello"):
                reply = {"v": 1, "descriptor": descriptor()}
            else:
                reply = {"v": 1, "preds": predict(req)}
        except Exception as exc:  # noqa: BLE001 - report everything to the peer
            reply = {"v": 1, "error": str(exc)}
        print(json.dumps(reply), flush=True)


if __name__ == "__main__":
    main()
