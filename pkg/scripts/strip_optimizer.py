"""Drop optimizer state from training checkpoints, keeping weights and metadata."""

from __future__ import annotations

import sys

from taco import checkpoint as ckpt

for path in sys.argv[1:]:
    arrays, meta = ckpt.load(path)
    ckpt.save(path, {k: v for k, v in arrays.items() if not k.startswith("opt.")}, meta)
    print(path, ckpt.file_digest(path))
