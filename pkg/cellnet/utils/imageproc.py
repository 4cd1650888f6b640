from typing import List, Optional, Tuple
import logging
import math
import warnings

import numpy as np
from PIL import Image
from scipy import ndimage

from cellnet.errors import PreprocessError, DegenerateInputWarning
from cellnet.models.run_config import AugmentationPlan

logger = logging.getLogger(__name__)

STANDARD_SIZE = 78
ISOTROPY_TOLERANCE = 1e-6


# ============= INTENSITY =============

def select_channel(pixels: np.ndarray, mode: str = 'green') -> np.ndarray:
    '''
    Single intensity plane. RGB(A) rasters always give their green channel;
    single-channel rasters pass through. ``mode`` names the expected source
    format ('grayscale' or 'green' of RGB).
    '''
    pixels = np.asarray(pixels)
    if pixels.ndim == 3 and pixels.shape[2] in (3, 4):
        if mode == 'grayscale':
            logger.debug('RGB raster in grayscale mode, using its green channel')
        return pixels[:, :, 1].astype(np.float64)
    if pixels.ndim != 2:
        raise PreprocessError(f'Unsupported image shape {pixels.shape}')
    return pixels.astype(np.float64)


def contrast_normalize(image: np.ndarray) -> np.ndarray:
    '''(p - min) / (max - min); a constant image maps to zeros with a warning'''
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise PreprocessError('Cannot normalize an empty image')
    lo, hi = image.min(), image.max()
    if hi == lo:
        logger.warning(f'Constant image (value {lo}) normalized to zeros')
        warnings.warn('constant image normalized to zeros', DegenerateInputWarning, stacklevel=2)
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


# ============= GEOMETRY =============

def resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    '''Bilinear resize with corner pixels aligned; aspect ratio is not kept'''
    image = np.asarray(image, dtype=np.float64)
    if out_h < 1 or out_w < 1:
        raise PreprocessError(f'Target size must be positive, got {(out_h, out_w)}')
    in_h, in_w = image.shape
    rows = _axis_coords(in_h, out_h)
    cols = _axis_coords(in_w, out_w)
    grid_r, grid_c = np.meshgrid(rows, cols, indexing='ij')
    return ndimage.map_coordinates(image, [grid_r, grid_c], order=1, mode='nearest')


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def _exact_cos_sin(angle_degrees: float) -> Tuple[float, float]:
    quarter = angle_degrees / 90.0
    if quarter == round(quarter):
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(round(quarter)) % 4]
    theta = math.radians(angle_degrees)
    return math.cos(theta), math.sin(theta)


def _rotation_coords(shape, angle_degrees: float):
    h, w = shape
    cos_t, sin_t = _exact_cos_sin(angle_degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy, dx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing='ij')
    src_r = cy + sin_t * dx + cos_t * dy
    src_c = cx + cos_t * dx - sin_t * dy
    return src_r, src_c


def rotate_about_center(image: np.ndarray, angle_degrees: float) -> np.ndarray:
    '''Counter-clockwise as displayed, bilinear; pixels sampled from outside the frame are 0'''
    image = np.asarray(image, dtype=np.float64)
    src_r, src_c = _rotation_coords(image.shape, angle_degrees)
    return ndimage.map_coordinates(image, [src_r, src_c], order=1, mode='constant', cval=0.0)


def rotate_mask(mask: np.ndarray, angle_degrees: float) -> np.ndarray:
    '''Nearest-neighbour rotation, keeps the mask binary'''
    mask = np.asarray(mask, dtype=bool)
    src_r, src_c = _rotation_coords(mask.shape, angle_degrees)
    rotated = ndimage.map_coordinates(mask.astype(np.float64), [src_r, src_c], order=0, mode='constant', cval=0.0)
    return rotated > 0.5


def resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    rows = _axis_coords(mask.shape[0], out_h)
    cols = _axis_coords(mask.shape[1], out_w)
    grid_r, grid_c = np.meshgrid(rows, cols, indexing='ij')
    return ndimage.map_coordinates(mask.astype(np.float64), [grid_r, grid_c], order=0, mode='nearest') > 0.5


# ============= PCA ALIGNMENT =============

def principal_angle(mask: np.ndarray) -> float:
    '''
    Counter-clockwise rotation in degrees that turns the mask's principal
    direction vertical. Returns 0.0 (with a warning) for isotropic masks.
    '''
    mask = np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise PreprocessError('Cannot align with an empty mask')
    if rows.size < 2:
        raise PreprocessError('Alignment needs at least two foreground pixels')

    # x to the right, y upward
    coords = np.column_stack([cols, -rows]).astype(np.float64)
    coords -= coords.mean(axis=0)
    cov = coords.T @ coords / coords.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    major, minor = eigvals[1], eigvals[0]
    if major <= 0 or (major - minor) <= ISOTROPY_TOLERANCE * major:
        logger.warning('Isotropic mask, no alignment rotation applied')
        warnings.warn('isotropic mask, alignment skipped', DegenerateInputWarning, stacklevel=2)
        return 0.0

    vx, vy = eigvecs[:, 1]
    if abs(vy) < 1e-12:
        vx, vy = abs(vx), 0.0
    elif vy < 0:
        vx, vy = -vx, -vy
    direction = math.degrees(math.atan2(vy, vx))
    return 90.0 - direction


def pca_align(image: np.ndarray, mask: np.ndarray, target: int = STANDARD_SIZE,
              return_mask: bool = False):
    '''Rotate so the mask's principal direction is vertical, then resize to target x target'''
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape:
        raise PreprocessError(f'Mask shape {mask.shape} does not match image shape {image.shape}')
    angle = principal_angle(mask)
    logger.debug(f'pca_align rotating by {angle:.3f} degrees')
    aligned = resize(rotate_about_center(image, angle), target, target)
    if not return_mask:
        return aligned
    return aligned, resize_mask(rotate_mask(mask, angle), target, target)


# ============= AUGMENTATION =============

def augment(image: np.ndarray, plan: AugmentationPlan) -> List[np.ndarray]:
    '''The m = 360/theta rotated variants; variant 0 is the input itself'''
    image = np.asarray(image, dtype=np.float64)
    variants = [image.copy()]
    for angle in plan.angles()[1:]:
        variants.append(rotate_about_center(image, angle))
    return variants


# ============= PIPELINE =============

def preprocess_array(pixels: np.ndarray, mask: Optional[np.ndarray] = None, align: bool = False,
                     target: int = STANDARD_SIZE, resize_output: bool = True,
                     channel_mode: str = 'green') -> np.ndarray:
    '''
    Channel selection -> contrast_normalize -> optional pca_align -> resize.

    With ``resize_output`` False the normalized (and aligned) image keeps its
    source size; used when augmentation rotates before resizing.
    '''
    image = contrast_normalize(select_channel(pixels, channel_mode))
    if align:
        if mask is None:
            raise PreprocessError('Alignment requested but the sample has no mask')
        if not resize_output:
            return rotate_about_center(image, principal_angle(mask))
        return pca_align(image, mask, target)
    if not resize_output:
        return image
    return resize(image, target, target)


def rotation_variants(pixels: np.ndarray, mask: Optional[np.ndarray] = None, align: bool = False,
                      target: int = STANDARD_SIZE, plan: Optional[AugmentationPlan] = None,
                      channel_mode: str = 'green') -> List[np.ndarray]:
    '''
    The target x target network inputs of one raw image under ``plan``.
    'post_resize' rotates the preprocessed image; 'pre_resize' rotates the
    normalized (and aligned) source and resizes each copy. Variant 0 is
    always the unrotated image. Training and test time both go through here.
    '''
    if plan is None or plan.variant_count == 1:
        return [preprocess_array(pixels, mask, align, target, channel_mode=channel_mode)]
    if plan.rotation_stage == 'post_resize':
        return augment(preprocess_array(pixels, mask, align, target, channel_mode=channel_mode), plan)
    source = preprocess_array(pixels, mask, align, target, resize_output=False, channel_mode=channel_mode)
    return [resize(v, target, target) for v in augment(source, plan)]


def preprocess(sample, align: bool = False, target: int = STANDARD_SIZE, channel_mode: str = 'green') -> np.ndarray:
    '''Load a CellSample from disk and run preprocess_array on it'''
    pixels = load_image(sample.image_path)
    mask = None
    if align:
        if not sample.mask_path:
            raise PreprocessError(f'Alignment requested but sample {sample.id} has no mask')
        mask = load_mask(sample.mask_path)
    return preprocess_array(pixels, mask, align=align, target=target, channel_mode=channel_mode)


# ============= RASTER IO =============

def load_image(path: str) -> np.ndarray:
    '''8/16-bit grayscale or 8-bit RGB raster as a numpy array (intensities unchanged)'''
    try:
        with Image.open(path) as img:
            if img.mode in ('P', 'LA', 'PA', 'CMYK', 'YCbCr'):
                img = img.convert('RGB')
            return np.array(img)
    except (OSError, ValueError) as e:
        raise PreprocessError(f'Failed to read image {path}: {e}')


def load_mask(path: str) -> np.ndarray:
    return select_channel(load_image(path)) > 0


def save_image(path: str, image: np.ndarray, bits: int = 8) -> None:
    '''Write a [0, 1] image as an 8- or 16-bit grayscale PNG'''
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        Image.fromarray(np.round(image * 65535).astype(np.uint16)).save(path)
    else:
        Image.fromarray(np.round(image * 255).astype(np.uint8)).save(path)


def save_rgb(path: str, rgb: np.ndarray) -> None:
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(rgb * 255).astype(np.uint8)).save(path)


def save_mask(path: str, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path)
