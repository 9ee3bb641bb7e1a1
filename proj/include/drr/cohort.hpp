#pragma once

// Deterministic synthesis of two-lab, two-class peptide-range cohorts with
// controllable biomarkers and a tunable class/lab confounder, plus the disk
// format (meta.json + intensities.csv).
//
// Every patient is measured in both labs (the same physical cores measured
// twice), which is what makes inter-lab testing on held-out patients
// possible. Lab-specific artifacts: smooth exponential baseline, peak width,
// a small mass-calibration shift, and the confounder -- a baseline amplitude
// that couples to the class label with opposite sign in the two labs.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "drr/model.hpp"
#include "drr/types.hpp"

namespace drr {

struct CohortSample {
  std::string sample_id;
  std::string patient_id;
  std::string lab_id;
  int label = 0;
  Spectrum spectrum;
};

struct Cohort {
  double mz_start = 0.0;
  double mz_step = 1.0;
  int n = 0;
  std::vector<std::string> class_names;
  std::vector<CohortSample> samples;

  std::vector<std::string> lab_ids() const;                 // sorted unique
  std::vector<std::string> patients_of_lab(const std::string& lab) const;  // sorted unique
  std::vector<const CohortSample*> lab_samples(const std::string& lab) const;
};

struct PeakSet {
  std::vector<double> positions_da;
  std::vector<double> amplitudes;
};

struct LabProfile {
  std::string id;
  double baseline_amplitude = 1.0;
  double baseline_decay_da = 400.0;  // e-folding length of the baseline
  double peak_sigma_scale = 1.0;     // relative to peak_sigma_da
  double mz_shift_da = 0.0;          // calibration offset
};

struct SynthConfig {
  uint64_t seed = 1;
  int patients_per_class = 20;  // shared between labs: each is measured twice
  int spots_min = 20;
  int spots_max = 40;
  int bins = 2000;
  double mz_start = 800.0;
  double mz_step = 0.6;

  std::array<PeakSet, 2> class_peaks;  // class-specific biomarkers
  PeakSet background_peaks;            // shared by both classes
  int envelope_peaks = 4;              // isotopic envelope length (3..5 typical)
  double envelope_decay = 0.6;
  double peak_sigma_da = 0.35;

  std::array<LabProfile, 2> labs;
  double confound_strength = 0.8;      // in [0, 1]
  double confound_contrast = 0.5;      // baseline swing at strength 1
  double baseline_jitter_log_sd = 0.30;  // per-spot lognormal on the baseline amplitude
  double patient_amp_log_sd = 0.45;      // per-(patient, peak) lognormal, shared across labs
  double spot_amp_log_sd = 0.55;         // per-(spot, peak) lognormal
  double noise_sd = 0.02;                // half-normal per-bin floor noise

  SynthConfig();  // defaults describe the standard experiment cohort
};

SynthConfig synth_config_from_json(const std::string& json_text);
std::string synth_config_to_json(const SynthConfig& cfg);
SynthConfig load_synth_config(const std::filesystem::path& path);

// monoisotopic peak plus envelope_peaks-1 isotopes spaced 1.00335 Da apart
// with geometrically decaying amplitudes.
std::vector<std::pair<double, double>> isotopic_envelope(double mono_mass_da, double amplitude,
                                                         int peaks = 4, double decay = 0.6);

// Pure function of the config; spectra are TIC-normalized.
Cohort generate_cohort(const SynthConfig& cfg);

// meta.json + intensities.csv; intensities round-trip bit-exactly.
void export_cohort(const Cohort& cohort, const std::filesystem::path& dir);
Cohort import_cohort(const std::filesystem::path& dir);

}  // namespace drr
