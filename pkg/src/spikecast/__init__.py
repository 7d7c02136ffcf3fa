"""spikecast: CNN-to-SNN conversion with explicit current control.

Converts pretrained CNNs (conv / dense / average-pool / batchnorm /
ReLU) into rate-coded integrate-and-fire networks, simulates them with a
clock-driven engine, and accounts accuracy against energy in operation
counts.
"""

from .container import (load_dataset, load_model, load_snn_model, save_dataset,
                        save_model, save_snn_model)
from .convert import (CalibrationStats, ConversionConfig, SnnLayer, SnnModel,
                      apply_tre, calibrate, convert, convert_pipeline,
                      fold_batchnorm, quantize)
from .engine import (NeuronLayerState, RecordFlags, SimTrace, classify,
                     classify_batch, encode_input, residual_delta, simulate,
                     simulate_batch, spiking_rate, step_layer)
from .errors import (DataError, InvariantError, ModelFormatError,
                     ShapeChainError, SpikecastError, UsageError)
from .metrics import (EnergyReport, FanCounts, accuracy_sweep, cnn_accuracy,
                      energy_report, evaluate, expected_spike_counts,
                      fan_counts, mac_ops, residual_stats, synaptic_ops,
                      synaptic_ops_per_step)
from .models import CnnModel, DatasetBundle, forward_batch, iter_stages
from .tensors import (avgpool_forward, batchnorm_forward, cnn_forward,
                      conv2d_forward, dense_forward)

__version__ = "0.1.0"
