#!/usr/bin/env python3
# This standalone script converts KITTI velodyne .bin scans into gray ASCII PLY files for inspection.
# Run it from the project root or point --root at it.
# Needs to have numpy installed
# pip3 install numpy
import argparse
import os
import sys

# --DEFINE VARIABLES--#
DEFAULT_SUBSAMPLE = 0  # 0 keeps every point
# --DEFINE VARIABLES--#
# --START SCRIPT--#

try:
    import numpy  # noqa: F401
except ModuleNotFoundError:
    print('Requirements Error: numpy not installed. Please install using the command "pip install numpy"')
    sys.exit(1)

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from modules.data import GRAY
from modules.data import export_ply
from modules.data import load_kitti_bin
from modules.data import sample_points
from modules.util import Failed


def convert(source, dest, subsample=DEFAULT_SUBSAMPLE, seed=0):
    cloud = load_kitti_bin(source)
    points = cloud
    if subsample and subsample < len(cloud):
        _, points = sample_points(cloud, subsample, seed=seed)
    export_ply([(points, GRAY)], dest)
    return len(cloud), len(points)


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Convert KITTI velodyne .bin scans to PLY.")
    parser.add_argument("scans", nargs="+", help="One or more .bin files")
    parser.add_argument("-d", "--dest", default=None, help="Output directory (default: next to each scan)")
    parser.add_argument("-n", "--subsample", type=int, default=DEFAULT_SUBSAMPLE, help="Farthest-point subsample size")
    parser.add_argument("-s", "--seed", type=int, default=0, help="Seed for the subsample start point")
    args = parser.parse_args()

    failures = 0
    for scan in args.scans:
        directory = args.dest or os.path.dirname(os.path.abspath(scan))
        os.makedirs(directory, exist_ok=True)
        target = os.path.join(directory, os.path.splitext(os.path.basename(scan))[0] + ".ply")
        try:
            total, kept = convert(scan, target, args.subsample, args.seed)
        except Failed as e:
            print(e)
            failures += 1
            continue
        print(f"{scan} -> {target} ({kept}/{total} points)")
    sys.exit(1 if failures else 0)
