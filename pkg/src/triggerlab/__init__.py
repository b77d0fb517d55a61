"""Desk-scale laboratory for dynamic audio backdoor attacks and defenses.

Submodules:
  dsp       waveforms, WAV I/O, SNR arithmetic, trigger attachment, channel
  features  differentiable waveform -> MFCC pipeline
  autograd  minimal reverse-mode engine and Adam
  model     CNN classifiers, training, prediction, activation taps
  data      dataset loading, synthetic corpus, noise banks, splits
  attack    surrogate assembly, trigger optimization, clean-label poisoning
  defense   filter, fine-pruning, STRIP, Gram-matrix anomaly index
  evaluate  BA/ASR metrics, paired t-test, reports
  cli       experiment orchestration
"""

from .dsp import (ChannelConfig, NoiseBank, Waveform, add_trigger, load_wav,
                  mix_noise, save_wav, scale_for_snr, simulate_channel, snr_db)
from .features import FeatureTensor, MfccConfig, mfcc, mfcc_gradient
from .data import (LabeledDataset, SynthConfig, load_dataset, load_noise_bank,
                   stratified_split, synth_corpus)
from .model import (ArchSpec, NetworkModel, TrainConfig, activations,
                    build_model, large_cnn, load_model, predict, save_model,
                    small_cnn, train)
from .attack import (PoisonManifest, Trigger, TriggerGenConfig,
                     build_surrogate_dataset, generate_trigger, load_trigger,
                     poison_dataset, save_trigger)
from .defense import (AnomalyReport, PruneReport, StripVerdict, beatrix_index,
                      filter_defense, fine_prune, strip_entropy)
from .evaluate import (EvalReport, attack_success_rate, benign_accuracy,
                       class_wise_asr, designated_trigger, paired_t_test,
                       read_report, write_report)

__version__ = "0.1.0"
