"""
Fichier __init__.py pour le package utils
"""
from .binary import pack_header, unpack_header, pack_tensors, unpack_tensors, load_state
from .freeze import FreezeRegistry, freezing, stop_gradient, frozen_indices
from .rundir import prepare_run_dir, attach_file_log, detach_file_log, write_json, write_table, MetricLog

__all__ = [
    'pack_header',
    'unpack_header',
    'pack_tensors',
    'unpack_tensors',
    'load_state',
    'FreezeRegistry',
    'freezing',
    'stop_gradient',
    'frozen_indices',
    'prepare_run_dir',
    'attach_file_log',
    'detach_file_log',
    'write_json',
    'write_table',
    'MetricLog'
]
