from .dataset import DatasetError, load_dataset, load_frame, write_dataset
from .mapio import MapFormatError, load_map, save_map
from .metrics import psnr, ssim
from .synth import SyntheticScene, fronto_wall, reference_room, synth_generate

__all__ = ["DatasetError", "load_dataset", "load_frame", "write_dataset", "MapFormatError", "load_map",
           "save_map", "psnr", "ssim", "SyntheticScene", "fronto_wall", "reference_room", "synth_generate"]
