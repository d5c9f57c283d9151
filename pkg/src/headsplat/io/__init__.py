from .gdhm import decode, encode, read_gdhm, write_gdhm
from .model_file import load_model, save_model
from .ply import export_ply, read_ply

__all__ = ["decode", "encode", "read_gdhm", "write_gdhm", "load_model", "save_model", "export_ply", "read_ply"]
