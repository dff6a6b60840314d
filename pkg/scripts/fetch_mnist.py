#!/usr/bin/env python3
"""Download the canonical MNIST IDX files (the library itself never touches
the network). Usage: python scripts/fetch_mnist.py [DEST_DIR]"""
import hashlib
import os
import sys
import urllib.request

FILES = {
    "train-images-idx3-ubyte.gz": "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609",
    "train-labels-idx1-ubyte.gz": "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c",
    "t10k-images-idx3-ubyte.gz": "8d422c7b0a1c1c79245a5bcf07fe86e33eeafee792b84584aec276f5a2dbc4e6",
    "t10k-labels-idx1-ubyte.gz": "f7ae60f92e00ec6debd23a6088c31dbd2371eca3ffa0defaefb259924204aec6",
}
MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
]


def main() -> int:
    dest = sys.argv[1] if len(sys.argv) > 1 else "data/mnist"
    os.makedirs(dest, exist_ok=True)
    for name, sha in FILES.items():
        path = os.path.join(dest, name)
        if os.path.exists(path) and hashlib.sha256(open(path, "rb").read()).hexdigest() == sha:
            print(f"{name}: already present")
            continue
        for mirror in MIRRORS:
            url = mirror + name
            try:
                print(f"fetching {url}")
                urllib.request.urlretrieve(url, path)
                digest = hashlib.sha256(open(path, "rb").read()).hexdigest()
                if digest != sha:
                    print(f"  sha256 mismatch ({digest}); trying next mirror")
                    continue
                break
            except OSError as e:
                print(f"  failed: {e}")
        else:
            print(f"could not fetch {name}; download it manually into {dest}/")
            return 1
    with open(os.path.join(dest, "sha256sums"), "w") as f:
        for name, sha in FILES.items():
            f.write(f"{sha}  {name}\n")
    print(f"done; pass --data {dest} to twnkit train/infer")
    return 0


if __name__ == "__main__":
    sys.exit(main())
