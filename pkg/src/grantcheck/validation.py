"""Input validation helpers shared by the estimators and the pipeline."""

import re

PACKAGE_RE = re.compile(r"^[A-Za-z0-9_]+(\.[A-Za-z0-9_]+)+$")
DEVICE_ID_RE = re.compile(r"^[0-9A-Za-z_-]{1,64}$")
PERMISSION_NAME_RE = re.compile(r"^[A-Z][A-Z0-9_]*$")
ANDROID_VERSIONS = range(10, 16)


def check_package_name(package_name):
    """Return ``package_name`` if it is a dotted reverse-domain identifier."""
    if not isinstance(package_name, str) or not PACKAGE_RE.match(package_name):
        raise ValueError(f"ill-formed package name: {package_name!r}")
    return package_name


def check_device_id(device_id):
    if not isinstance(device_id, str) or not DEVICE_ID_RE.match(device_id):
        raise ValueError(f"ill-formed device id: {device_id!r}")
    return device_id


def check_permission_name(name):
    if not isinstance(name, str) or not PERMISSION_NAME_RE.match(name):
        raise ValueError(f"ill-formed permission name: {name!r}")
    return name


def check_android_version(version):
    if isinstance(version, bool) or not isinstance(version, int) or version not in ANDROID_VERSIONS:
        raise ValueError(f"android version out of range 10-15: {version!r}")
    return version


def strip_permission_prefix(name):
    """``android.permission.CAMERA`` -> ``CAMERA``."""
    return name.rsplit(".", 1)[-1] if name.startswith("android.permission.") else name
