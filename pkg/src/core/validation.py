from pathlib import Path
from typing import Tuple, Optional
import re

from .config import settings

UTF8_BOM = b'\xef\xbb\xbf'


class InputFileValidator:
    # Extension to accepted leading bytes
    FILE_SIGNATURES = {
        '.xlsx': [b'\x50\x4b\x03\x04'],  # ZIP container
        '.json': [b'{', b'['],
    }

    @staticmethod
    def validate_input_file(path: Path, max_size: Optional[int] = None) -> Tuple[bool, Optional[str]]:
        """
        Check an input file before it is parsed
        Returns: (is_valid, error_message)
        """
        max_size = settings.max_file_size if max_size is None else max_size

        # 1. Check filename
        if not InputFileValidator._validate_filename(path.name):
            return False, f"Invalid filename or unsupported extension: {path.name}"

        # 2. Check the file exists and is a regular file
        if not path.exists():
            return False, f"File not found: {path}"
        if not path.is_file():
            return False, f"Not a regular file: {path}"

        # 3. Check file size
        file_size = path.stat().st_size
        if file_size == 0:
            return False, f"File is empty: {path}"
        if file_size > max_size:
            return False, f"File size exceeds limit of {max_size} bytes"

        # 4. Validate file signature
        with path.open('rb') as handle:
            head = handle.read(1024)
        if not InputFileValidator._validate_file_signature(head, path.suffix.lower()):
            return False, "File content does not match extension"

        return True, None

    @staticmethod
    def _validate_filename(filename: str) -> bool:
        if not filename or '\x00' in filename:
            return False

        dangerous_chars = ['<', '>', '"', '|', '?', '*']
        if any(char in filename for char in dangerous_chars):
            return False

        return Path(filename).suffix.lower() in settings.allowed_extensions

    @staticmethod
    def _validate_file_signature(head: bytes, file_ext: str) -> bool:
        if file_ext in ('.csv', '.toml'):
            try:
                text = head.decode('utf-8')
            except UnicodeDecodeError as e:
                # a multi-byte character cut at the end of the sniffed block is fine
                if e.start < len(head) - 3:
                    return False
                text = head[:e.start].decode('utf-8')
            if file_ext == '.csv':
                return ',' in text or '\n' in text
            return True

        signatures = InputFileValidator.FILE_SIGNATURES.get(file_ext)
        if signatures is None:
            return True
        stripped = head.removeprefix(UTF8_BOM).lstrip() if file_ext == '.json' else head
        return any(stripped.startswith(sig) for sig in signatures)

    @staticmethod
    def sanitize_label(label: str) -> str:
        """Make a schedule or parameter label safe for use in output file names"""
        label = re.sub(r'\s+', '_', label.strip())
        label = re.sub(r'[^A-Za-z0-9_.-]', '', label)
        return label or "unnamed"
