"""Edge-guided attention U-Net for solar filament segmentation."""

__version__ = "0.1.0"
