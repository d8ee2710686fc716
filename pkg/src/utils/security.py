import os
import logging
from pathlib import Path


class SecurityError(Exception):
    """Raised when a referenced file escapes its allowed root directory."""


def validate_path(path: str | Path, root_dir: str | Path) -> Path:
    """
    Validates that a path referenced by a document stays within root_dir.
    Prevents scene files from pulling meshes or textures from arbitrary
    locations via '..' or absolute paths.

    Args:
        path: The path to validate (absolute or relative to root_dir).
        root_dir: The allowed root directory.

    Returns:
        The absolute path if valid.

    Raises:
        SecurityError: If the path is outside the root directory.
    """
    abs_root = os.path.abspath(root_dir)
    abs_path = os.path.abspath(os.path.join(abs_root, os.fspath(path)))

    try:
        common = os.path.commonpath([abs_root, abs_path])
    except ValueError:
        # Different drives on Windows
        raise SecurityError(f"Path '{path}' is on a different drive/location than root '{root_dir}'")

    if common != abs_root:
        logging.warning(f"Security Alert: Path traversal attempt detected. {path} is outside {root_dir}")
        raise SecurityError(f"Access denied: Path '{path}' is outside the allowed root directory.")

    return Path(abs_path)


def safe_write_bytes(path: str | Path, content: bytes, root_dir: str | Path | None = None) -> Path:
    """
    Writes an artifact atomically: the bytes go to a sibling temp file that is
    renamed over the target, so readers never observe a partial artifact.
    When root_dir is given the target must lie inside it.
    """
    target = Path(path)
    if root_dir is not None:
        target = validate_path(target, root_dir)
    target = target.absolute()

    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_name(target.name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(content)
        os.replace(tmp, target)
        logging.info(f"Successfully wrote {len(content)} bytes to {target}")
    except OSError as e:
        logging.error(f"Failed to write file {target}: {e}")
        raise

    return target
