import os
from pathlib import Path
from typing import Optional


def resolve_input_path(path: str) -> Optional[str]:
    """
    Resolve a data or config path relative to the execution directory.

    Args:
        path: Path to the file (relative or absolute)

    Returns:
        Absolute path to the file or None if not found
    """
    # If it's an absolute path, verify it exists
    if os.path.isabs(path):
        return path if os.path.exists(path) else None

    # Try relative to current working directory
    cwd_path = os.path.join(os.getcwd(), path)
    if os.path.exists(cwd_path):
        return os.path.abspath(cwd_path)

    # Try relative to project root when launched from scripts/
    if os.path.basename(os.getcwd()) == "scripts":
        root_path = os.path.join(os.path.dirname(os.getcwd()), path)
        if os.path.exists(root_path):
            return os.path.abspath(root_path)

    return None


def ensure_output_dir(path: str) -> Path:
    """Create the output directory (and parents) if needed and return it."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out
