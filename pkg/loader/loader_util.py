from typing import Iterable

import numpy as np

from errors import InputError, ParseError, VersionError

END_OF_HEADER = 'end'


class HeaderLine:
    number: int
    text: str

    def __init__(self, number: int, text: str):
        self.number = number
        self.text = text

    def fields(self) -> list[str]:
        return self.text.split()


class PayloadReader:
    payload: bytes
    base_offset: int
    cursor: int

    def __init__(self, payload: bytes, base_offset: int):
        self.payload = payload
        self.base_offset = base_offset
        self.cursor = 0

    def take(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        size = count * 8
        if self.cursor + size > len(self.payload):
            raise ParseError(
                f"payload truncated: need {size} bytes for shape {shape}, {len(self.payload) - self.cursor} left",
                offset=self.base_offset + self.cursor,
            )
        array = np.frombuffer(self.payload, dtype='<f8', count=count, offset=self.cursor).astype(np.float64)
        self.cursor += size
        return array.reshape(shape)

    def finish(self):
        if self.cursor != len(self.payload):
            raise ParseError(
                f"{len(self.payload) - self.cursor} unexpected trailing bytes",
                offset=self.base_offset + self.cursor,
            )


def format_shape(shape: Iterable[int]) -> str:
    return ','.join(str(int(extent)) for extent in shape)


def parse_shape(text: str, line: int) -> tuple[int, ...]:
    try:
        shape = tuple(int(extent) for extent in text.split(','))
    except ValueError:
        raise ParseError(f"malformed shape '{text}'", line=line)
    if any(extent <= 0 for extent in shape):
        raise ParseError(f"non-positive extent in shape '{text}'", line=line)
    return shape


def parse_key_values(header_line: HeaderLine, keyword: str) -> dict[str, str]:
    fields = header_line.fields()
    if not fields or fields[0] != keyword:
        raise ParseError(f"expected '{keyword}' record, found '{header_line.text}'", line=header_line.number)
    pairs = {}
    for field in fields[1:]:
        if '=' not in field:
            raise ParseError(f"expected key=value, found '{field}'", line=header_line.number)
        key, value = field.split('=', 1)
        pairs[key] = value
    return pairs


def require(pairs: dict[str, str], key: str, header_line: HeaderLine) -> str:
    if key not in pairs:
        raise ParseError(f"record '{header_line.text}' lacks '{key}'", line=header_line.number)
    return pairs[key]


def write_container(path: str, magic: str, version: int, header_lines: list[str], arrays: list[np.ndarray]):
    lines = [f"{magic} {version}"] + header_lines + [END_OF_HEADER]
    with open(path, 'wb') as container:
        container.write(('\n'.join(lines) + '\n').encode('utf-8'))
        for array in arrays:
            container.write(np.ascontiguousarray(array, dtype='<f8').tobytes())


def read_container(path: str, magic: str, version: int) -> tuple[list[HeaderLine], PayloadReader]:
    try:
        with open(path, 'rb') as container:
            content = container.read()
    except OSError as e:
        raise InputError(f"cannot read '{path}': {e}")
    offset = 0
    number = 0
    header = []
    while True:
        newline = content.find(b'\n', offset)
        if newline < 0:
            raise ParseError("header is not terminated", line=number + 1, offset=offset)
        number += 1
        try:
            text = content[offset:newline].decode('utf-8')
        except UnicodeDecodeError:
            raise ParseError("header is not valid UTF-8", line=number, offset=offset)
        offset = newline + 1
        if text == END_OF_HEADER:
            break
        header.append(HeaderLine(number, text))
    if not header:
        raise ParseError("empty header", line=1)
    signature = header[0].fields()
    if len(signature) != 2 or signature[0] != magic:
        raise ParseError(f"expected '{magic} <version>', found '{header[0].text}'", line=1)
    try:
        found_version = int(signature[1])
    except ValueError:
        raise ParseError(f"malformed version '{signature[1]}'", line=1)
    if found_version != version:
        raise VersionError(f"{path}: format version {found_version}, this build reads version {version}")
    return header[1:], PayloadReader(content[offset:], offset)
