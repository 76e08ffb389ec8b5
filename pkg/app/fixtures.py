"""
RxExtract v1.0.0 - Synthetic Fixtures
Seeded prescription stand-ins: one medicine name per grayscale image

Rendering Rules:
- 5 x 3 dot-matrix glyphs, 4 px advance, bright ink on a dark background
- Text band starts at x = 4 and at a random row; box and mask cover the band exactly
- Corruption flips transcript characters (copy only) to simulate recognition errors
- Images stored as binary PGM (P5), annotations as JSON

Directory layout:
    {fixtures}/
        images/0000.pgm ...
        annotations.json
        manifest.json
        lexicon.csv
"""

import csv
import json
import logging
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from PIL import Image

from app.errors import ConfigurationError, FormatError
from app.geometry import rle_counts, rle_decode, rle_encode
from app.matcher import Lexicon
from app.metrics import OVERALL_CATEGORY

logger = logging.getLogger('rxextract.fixtures')

GLYPH_HEIGHT = 5
GLYPH_WIDTH = 3
ADVANCE = 4
LEFT_MARGIN = 4
INK = 255
CORRUPTION_ALPHABET = string.ascii_lowercase + string.digits

# '#' is ink
FONT: Dict[str, Sequence[str]] = {
    'a': ('.#.', '#.#', '###', '#.#', '#.#'),
    'b': ('##.', '#.#', '##.', '#.#', '##.'),
    'c': ('.##', '#..', '#..', '#..', '.##'),
    'd': ('##.', '#.#', '#.#', '#.#', '##.'),
    'e': ('###', '#..', '##.', '#..', '###'),
    'f': ('###', '#..', '##.', '#..', '#..'),
    'g': ('.##', '#..', '#.#', '#.#', '.##'),
    'h': ('#.#', '#.#', '###', '#.#', '#.#'),
    'i': ('###', '.#.', '.#.', '.#.', '###'),
    'j': ('..#', '..#', '..#', '#.#', '.#.'),
    'k': ('#.#', '#.#', '##.', '#.#', '#.#'),
    'l': ('#..', '#..', '#..', '#..', '###'),
    'm': ('#.#', '###', '###', '#.#', '#.#'),
    'n': ('##.', '#.#', '#.#', '#.#', '#.#'),
    'o': ('.#.', '#.#', '#.#', '#.#', '.#.'),
    'p': ('##.', '#.#', '##.', '#..', '#..'),
    'q': ('.#.', '#.#', '#.#', '##.', '.##'),
    'r': ('##.', '#.#', '##.', '#.#', '#.#'),
    's': ('.##', '#..', '.#.', '..#', '##.'),
    't': ('###', '.#.', '.#.', '.#.', '.#.'),
    'u': ('#.#', '#.#', '#.#', '#.#', '###'),
    'v': ('#.#', '#.#', '#.#', '#.#', '.#.'),
    'w': ('#.#', '#.#', '###', '###', '#.#'),
    'x': ('#.#', '#.#', '.#.', '#.#', '#.#'),
    'y': ('#.#', '#.#', '.#.', '.#.', '.#.'),
    'z': ('###', '..#', '.#.', '#..', '###'),
    '0': ('###', '#.#', '#.#', '#.#', '###'),
    '1': ('.#.', '##.', '.#.', '.#.', '###'),
    '2': ('##.', '..#', '.#.', '#..', '###'),
    '3': ('##.', '..#', '.#.', '..#', '##.'),
    '4': ('#.#', '#.#', '###', '..#', '..#'),
    '5': ('###', '#..', '##.', '..#', '##.'),
    '6': ('.##', '#..', '###', '#.#', '###'),
    '7': ('###', '..#', '.#.', '.#.', '.#.'),
    '8': ('###', '#.#', '###', '#.#', '###'),
    '9': ('###', '#.#', '###', '..#', '##.'),
    ' ': ('...', '...', '...', '...', '...'),
    '-': ('...', '...', '###', '...', '...'),
}

_GLYPHS = {
    char: np.array([[cell == '#' for cell in row] for row in rows], dtype=bool)
    for char, rows in FONT.items()
}


@dataclass(frozen=True)
class FixtureAnnotation:
    image: str
    boxes: List[List[float]]
    masks: List[dict]
    transcripts: List[str]
    noisy_transcripts: List[str]
    category: str = 'valid'

    def to_record(self) -> dict:
        return {
            'image': self.image,
            'boxes': self.boxes,
            'masks': self.masks,
            'transcripts': self.transcripts,
            'noisy_transcripts': self.noisy_transcripts,
            'category': self.category,
        }

    def mask_arrays(self) -> List[np.ndarray]:
        return [rle_decode(rle) for rle in self.masks]


@dataclass
class FixtureSet:
    """
    Grayscale uint8 images with their annotations and generation seed.
    params records every generation argument besides the seed.
    """
    images: List[np.ndarray]
    annotations: List[FixtureAnnotation]
    seed: int
    params: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def image_tensor(self, index: int) -> np.ndarray:
        """Image scaled to float32 [0, 1]."""
        return self.images[index].astype(np.float32) / np.float32(INK)

    def validate(self):
        for image, annotation in zip(self.images, self.annotations):
            height, width = image.shape
            check_annotation(annotation, height, width)


def check_annotation(annotation: FixtureAnnotation, height: int, width: int):
    """
    Per-image annotation checks: region counts agree, boxes lie inside the
    image, every mask RLE is well formed and sized to the image, and the
    category is not the reserved overall label.
    """
    name = annotation.image
    if not (len(annotation.boxes) == len(annotation.masks) == len(annotation.transcripts)
            == len(annotation.noisy_transcripts)):
        raise FormatError(f"{name}: boxes, masks and transcripts differ in count")
    if annotation.category == OVERALL_CATEGORY:
        raise FormatError(f"{name}: category '{OVERALL_CATEGORY}' is reserved for the overall row")
    for box in annotation.boxes:
        x1, y1, x2, y2 = box
        if not (0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height):
            raise FormatError(f"{name}: box {box} outside {width}x{height} image")
    for index, rle in enumerate(annotation.masks):
        try:
            mask_height, mask_width, _ = rle_counts(rle)
        except FormatError as e:
            raise FormatError(f"{name}: mask {index}: {e}")
        if (mask_height, mask_width) != (height, width):
            raise FormatError(f"{name}: mask {index} is {mask_height}x{mask_width}, image is {height}x{width}")


def band_width(text: str) -> int:
    return ADVANCE * len(text) - (ADVANCE - GLYPH_WIDTH)


def render_text(canvas: np.ndarray, text: str, top: int, left: int = LEFT_MARGIN, ink: int = INK):
    """Draw text onto a uint8 canvas in place."""
    for position, char in enumerate(text):
        glyph = _GLYPHS.get(char)
        if glyph is None:
            raise ConfigurationError(f"no glyph for character {char!r}")
        x = left + position * ADVANCE
        cell = canvas[top:top + GLYPH_HEIGHT, x:x + GLYPH_WIDTH]
        cell[glyph] = ink


def corrupt(text: str, rng: np.random.Generator, p_noise: float,
            alphabet: str = CORRUPTION_ALPHABET, max_flips: Optional[int] = None) -> str:
    """
    Flip each character with probability p_noise to a different alphabet
    character; after max_flips flips the rest are kept.
    """
    if not 0.0 <= p_noise <= 1.0:
        raise ConfigurationError(f"p_noise {p_noise} outside [0, 1]")
    if len(alphabet) < 2:
        raise ConfigurationError("corruption alphabet needs at least two characters")
    chars = list(text)
    flips = 0
    for position, char in enumerate(chars):
        if max_flips is not None and flips >= max_flips:
            break
        if rng.random() >= p_noise:
            continue
        choices = [c for c in alphabet if c != char]
        chars[position] = choices[int(rng.integers(len(choices)))]
        flips += 1
    return ''.join(chars)


def gen_fixtures(seed: int, count: int, lexicon: Lexicon, p_noise: float = 0.0,
                 category: str = 'valid', height: int = 64, width: int = 256,
                 brightness_jitter: float = 0.0, noise_std: float = 0.0,
                 max_flips: Optional[int] = None, alphabet: str = CORRUPTION_ALPHABET) -> FixtureSet:
    """
    Generate a deterministic FixtureSet.

    Args:
        seed: generator seed; same arguments give byte-identical fixtures
        count: number of images (>= 1)
        lexicon: transcripts are drawn from its entries
        p_noise: per-character flip probability for noisy_transcripts
        category: label carried by every annotation
        brightness_jitter: ink brightness offset drawn from uniform(-j, j) per image
        noise_std: standard deviation of additive Gaussian pixel noise (0-1 scale)
        max_flips: cap on flips per transcript (None = unlimited)
    """
    if count < 1:
        raise ConfigurationError(f"fixture count must be at least 1, got {count}")
    if category == OVERALL_CATEGORY:
        raise ConfigurationError(f"category '{OVERALL_CATEGORY}' is reserved for the overall CER row")
    if height < GLYPH_HEIGHT or width < LEFT_MARGIN:
        raise ConfigurationError(f"image {height}x{width} too small for a text band")
    candidates = [entry for entry in lexicon.entries if LEFT_MARGIN + band_width(entry) <= width]
    if len(candidates) < len(lexicon.entries):
        logger.warning(f"{len(lexicon.entries) - len(candidates)} lexicon entries too wide for {width}px, skipped")
    if not candidates:
        raise ConfigurationError(f"no lexicon entry fits a {width}px wide image")

    rng = np.random.default_rng(seed)
    images: List[np.ndarray] = []
    annotations: List[FixtureAnnotation] = []

    for index in range(count):
        transcript = candidates[int(rng.integers(len(candidates)))]
        top = int(rng.integers(height - GLYPH_HEIGHT + 1))
        noisy = corrupt(transcript, rng, p_noise, alphabet, max_flips)

        ink = INK
        if brightness_jitter > 0:
            ink = int(np.clip(round(INK * (1.0 + rng.uniform(-brightness_jitter, brightness_jitter))), 0, INK))
        canvas = np.zeros((height, width), dtype=np.uint8)
        render_text(canvas, transcript, top, ink=ink)
        if noise_std > 0:
            noisy_pixels = canvas.astype(np.float64) + rng.normal(0.0, noise_std * INK, size=canvas.shape)
            canvas = np.clip(np.rint(noisy_pixels), 0, INK).astype(np.uint8)

        box = [float(LEFT_MARGIN), float(top), float(LEFT_MARGIN + band_width(transcript)), float(top + GLYPH_HEIGHT)]
        mask = np.zeros((height, width), dtype=bool)
        mask[top:top + GLYPH_HEIGHT, LEFT_MARGIN:LEFT_MARGIN + band_width(transcript)] = True

        images.append(canvas)
        annotations.append(FixtureAnnotation(
            image=f'{index:04d}.pgm',
            boxes=[box],
            masks=[rle_encode(mask)],
            transcripts=[transcript],
            noisy_transcripts=[noisy],
            category=category,
        ))

    params = {
        'count': count, 'p_noise': p_noise, 'category': category, 'height': height, 'width': width,
        'brightness_jitter': brightness_jitter, 'noise_std': noise_std, 'max_flips': max_flips,
        'alphabet': alphabet,
    }
    logger.info(f"Generated {count} fixtures (seed {seed}, p_noise {p_noise}, category {category})")
    return FixtureSet(images=images, annotations=annotations, seed=seed, params=params)


# ==================== FILE I/O ====================

def write_pgm(image: np.ndarray, path: Union[str, Path]):
    # a 2-D uint8 array maps to mode 'L', which the PPM writer stores as P5
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format='PPM')


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """Read a binary grayscale PGM into a uint8 array."""
    try:
        with Image.open(path) as img:
            if img.format != 'PPM' or img.mode != 'L':
                raise FormatError(f"{path}: expected 8-bit grayscale PGM, got {img.format} {img.mode}")
            return np.array(img, dtype=np.uint8)
    except (OSError, SyntaxError) as e:
        raise FormatError(f"{path}: unreadable image ({e})")


def _dump_json(data, path: Path):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')


def save_fixtures(fixtures: FixtureSet, directory: Union[str, Path], lexicon: Optional[Lexicon] = None) -> Path:
    directory = Path(directory)
    image_dir = directory / 'images'
    image_dir.mkdir(parents=True, exist_ok=True)

    for image, annotation in zip(fixtures.images, fixtures.annotations):
        write_pgm(image, image_dir / annotation.image)
    _dump_json([a.to_record() for a in fixtures.annotations], directory / 'annotations.json')
    _dump_json({'seed': fixtures.seed, **fixtures.params}, directory / 'manifest.json')
    if lexicon is not None:
        with open(directory / 'lexicon.csv', 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            for entry in lexicon.entries:
                shown = lexicon.display_form(entry)
                writer.writerow([entry, shown] if shown != entry else [entry])

    logger.info(f"Saved {len(fixtures)} fixtures to {directory}")
    return directory


def _load_json(path: Path):
    if not path.is_file():
        raise FormatError(f"missing {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: {e.msg}", line=e.lineno)


def load_annotations(path: Union[str, Path]) -> List[FixtureAnnotation]:
    records = _load_json(Path(path))
    if not isinstance(records, list):
        raise FormatError(f"{path}: expected a list of annotation records", line=1)
    annotations = []
    for index, record in enumerate(records):
        try:
            transcripts = [str(t) for t in record['transcripts']]
            annotations.append(FixtureAnnotation(
                image=str(record['image']),
                boxes=[[float(v) for v in box] for box in record['boxes']],
                masks=list(record['masks']),
                transcripts=transcripts,
                noisy_transcripts=[str(t) for t in record.get('noisy_transcripts', transcripts)],
                category=str(record.get('category', 'valid')),
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: annotation record {index} is malformed ({e})")
    return annotations


def load_fixtures(directory: Union[str, Path]) -> FixtureSet:
    directory = Path(directory)
    annotations = load_annotations(directory / 'annotations.json')
    manifest_path = directory / 'manifest.json'
    manifest = _load_json(manifest_path) if manifest_path.is_file() else {}
    images = [read_pgm(directory / 'images' / a.image) for a in annotations]

    seed = manifest.pop('seed', None)
    # annotation checks run per image, inside the pipeline guard
    fixtures = FixtureSet(images=images, annotations=annotations, seed=seed, params=manifest)
    logger.info(f"Loaded {len(fixtures)} fixtures from {directory}")
    return fixtures
