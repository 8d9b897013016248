#!/usr/bin/env python3
"""The two binary containers, their failure modes, and seeded
reproducibility.

Run:  python3 demos/04_formats_and_determinism.py
Outputs land in demos/_out/.
"""

import hashlib
import struct
from pathlib import Path

import numpy as np

from ventseg.config import RunConfig
from ventseg.checkpoint import load_net, save_net
from ventseg.data.io import HEADER_SIZE, read_volume, write_volume
from ventseg.data.phantom import generate_phantom
from ventseg.errors import BadMagicError, TruncatedFileError
from ventseg.nets import ClassifierSpec, LocalizationNet

out_dir = Path(__file__).parent / "_out"
out_dir.mkdir(exist_ok=True)

print("== volume container ==")
arr = np.linspace(0, 1, 2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
path = out_dir / "tiny.dbv"
write_volume(arr, path, spacing=(0.5, 0.25, 0.25))
raw = path.read_bytes()
print(f"{path.name}: {len(raw)} bytes "
      f"({HEADER_SIZE} header + {arr.nbytes} payload)")
magic, dz, dy, dx = struct.unpack_from("<4s3I", raw)
print(f"header starts: magic={magic!r} dims=({dz},{dy},{dx})")
back = read_volume(path)
print(f"round trip exact: {np.array_equal(back.data, arr)}, "
      f"spacing {back.spacing}")

print("\ncorruption is refused, not guessed at:")
bad = out_dir / "bad.dbv"
bad.write_bytes(b"NOPE" + raw[4:])
try:
    read_volume(bad)
except BadMagicError as e:
    print(f"  wrong magic      -> BadMagicError: {e}")
bad.write_bytes(raw[:-5])
try:
    read_volume(bad)
except TruncatedFileError as e:
    print(f"  missing payload  -> TruncatedFileError: {e}")

print("\n== checkpoint container ==")
net = LocalizationNet(ClassifierSpec(input_side=8, conv_channels=(2, 2),
                                     hidden=4), seed=1)
ck = out_dir / "tiny.dbvw"
save_net(net, ck)
loaded = load_net(ck)
x = np.random.default_rng(0).standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
same = np.array_equal(net.forward(x), loaded.forward(x))
print(f"{ck.name}: {ck.stat().st_size} bytes; "
      f"reloaded net reproduces outputs exactly: {same}")
again = out_dir / "tiny_again.dbvw"
save_net(loaded, again)
print(f"save -> load -> save is byte-stable: "
      f"{ck.read_bytes() == again.read_bytes()}")

print("\n== seeded reproducibility ==")
digests = []
for run in range(2):
    vol, mask = generate_phantom(RunConfig.desk(seed=0).phantom, seed=9)
    h = hashlib.sha256(vol.data.tobytes() + mask.data.tobytes()).hexdigest()
    digests.append(h)
    print(f"run {run + 1}: sha256 {h[:16]}...")
print(f"identical: {digests[0] == digests[1]}")
