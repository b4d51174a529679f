"""Self-supervised scene flow pre-training for point-cloud 3D detection."""

import os

VERSION_FILE = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "VERSION")

with open(VERSION_FILE, encoding="utf-8") as handle:
    # a "-develop" style suffix is not part of the release number
    _release = handle.read().strip().rsplit("-", 1)[0]

__version_info__ = tuple(int(part) for part in _release.split("."))
__version__ = ".".join(str(part) for part in __version_info__)
