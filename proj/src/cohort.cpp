#include "drr/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <map>
#include <set>
#include <sstream>

#include "drr/errors.hpp"
#include "drr/io.hpp"
#include "drr/rng.hpp"

namespace drr {

namespace {

constexpr double kIsotopeSpacingDa = 1.00335;

}  // namespace

std::vector<std::string> Cohort::lab_ids() const {
  std::set<std::string> ids;
  for (const CohortSample& s : samples) ids.insert(s.lab_id);
  return {ids.begin(), ids.end()};
}

std::vector<std::string> Cohort::patients_of_lab(const std::string& lab) const {
  std::set<std::string> ids;
  for (const CohortSample& s : samples)
    if (s.lab_id == lab) ids.insert(s.patient_id);
  return {ids.begin(), ids.end()};
}

std::vector<const CohortSample*> Cohort::lab_samples(const std::string& lab) const {
  std::vector<const CohortSample*> out;
  for (const CohortSample& s : samples)
    if (s.lab_id == lab) out.push_back(&s);
  return out;
}

SynthConfig::SynthConfig() {
  class_peaks[0].positions_da = {905.3, 1044.9, 1208.1, 1302.7, 1577.2, 1721.4};
  class_peaks[0].amplitudes = {1.0, 0.8, 1.2, 0.7, 1.0, 0.9};
  class_peaks[1].positions_da = {862.8, 988.4, 1121.5, 1354.9, 1492.3, 1688.0};
  class_peaks[1].amplitudes = {0.9, 1.1, 0.8, 1.0, 0.7, 1.2};
  background_peaks.positions_da = {820.5, 870.1, 932.6,  1010.2, 1080.7, 1159.3,
                                   1248.8, 1333.1, 1430.5, 1555.9, 1650.3, 1801.6};
  background_peaks.amplitudes = {0.6, 1.0, 0.8, 1.2, 0.7, 0.9, 1.1, 0.8, 0.6, 0.9, 0.7, 0.8};
  labs[0] = {"HB", 0.30, 350.0, 1.0, 0.0};
  labs[1] = {"TR", 0.25, 500.0, 1.25, 0.25};
}

namespace {

nlohmann::ordered_json peakset_to_json(const PeakSet& p) {
  nlohmann::ordered_json j;
  j["positions_da"] = p.positions_da;
  j["amplitudes"] = p.amplitudes;
  return j;
}

PeakSet peakset_from_json(const nlohmann::json& j) {
  PeakSet p;
  p.positions_da = j.at("positions_da").get<std::vector<double>>();
  p.amplitudes = j.at("amplitudes").get<std::vector<double>>();
  if (p.positions_da.size() != p.amplitudes.size())
    throw ConfigError("peak set: positions and amplitudes differ in length");
  return p;
}

nlohmann::ordered_json lab_to_json(const LabProfile& l) {
  nlohmann::ordered_json j;
  j["id"] = l.id;
  j["baseline_amplitude"] = l.baseline_amplitude;
  j["baseline_decay_da"] = l.baseline_decay_da;
  j["peak_sigma_scale"] = l.peak_sigma_scale;
  j["mz_shift_da"] = l.mz_shift_da;
  return j;
}

LabProfile lab_from_json(const nlohmann::json& j) {
  LabProfile l;
  l.id = j.at("id").get<std::string>();
  l.baseline_amplitude = j.at("baseline_amplitude").get<double>();
  l.baseline_decay_da = j.at("baseline_decay_da").get<double>();
  l.peak_sigma_scale = j.at("peak_sigma_scale").get<double>();
  l.mz_shift_da = j.at("mz_shift_da").get<double>();
  return l;
}

}  // namespace

std::string synth_config_to_json(const SynthConfig& cfg) {
  nlohmann::ordered_json j;
  j["seed"] = cfg.seed;
  j["patients_per_class"] = cfg.patients_per_class;
  j["spots_min"] = cfg.spots_min;
  j["spots_max"] = cfg.spots_max;
  j["bins"] = cfg.bins;
  j["mz_start"] = cfg.mz_start;
  j["mz_step"] = cfg.mz_step;
  j["class_peaks"] = {peakset_to_json(cfg.class_peaks[0]), peakset_to_json(cfg.class_peaks[1])};
  j["background_peaks"] = peakset_to_json(cfg.background_peaks);
  j["envelope_peaks"] = cfg.envelope_peaks;
  j["envelope_decay"] = cfg.envelope_decay;
  j["peak_sigma_da"] = cfg.peak_sigma_da;
  j["labs"] = {lab_to_json(cfg.labs[0]), lab_to_json(cfg.labs[1])};
  j["confound_strength"] = cfg.confound_strength;
  j["confound_contrast"] = cfg.confound_contrast;
  j["baseline_jitter_log_sd"] = cfg.baseline_jitter_log_sd;
  j["patient_amp_log_sd"] = cfg.patient_amp_log_sd;
  j["spot_amp_log_sd"] = cfg.spot_amp_log_sd;
  j["noise_sd"] = cfg.noise_sd;
  return j.dump(1);
}

SynthConfig synth_config_from_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synth config: ") + e.what());
  }
  SynthConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (key == "seed") cfg.seed = value.get<uint64_t>();
    else if (key == "patients_per_class") cfg.patients_per_class = value.get<int>();
    else if (key == "spots_min") cfg.spots_min = value.get<int>();
    else if (key == "spots_max") cfg.spots_max = value.get<int>();
    else if (key == "bins") cfg.bins = value.get<int>();
    else if (key == "mz_start") cfg.mz_start = value.get<double>();
    else if (key == "mz_step") cfg.mz_step = value.get<double>();
    else if (key == "class_peaks") {
      cfg.class_peaks[0] = peakset_from_json(value.at(0));
      cfg.class_peaks[1] = peakset_from_json(value.at(1));
    } else if (key == "background_peaks") cfg.background_peaks = peakset_from_json(value);
    else if (key == "envelope_peaks") cfg.envelope_peaks = value.get<int>();
    else if (key == "envelope_decay") cfg.envelope_decay = value.get<double>();
    else if (key == "peak_sigma_da") cfg.peak_sigma_da = value.get<double>();
    else if (key == "labs") {
      cfg.labs[0] = lab_from_json(value.at(0));
      cfg.labs[1] = lab_from_json(value.at(1));
    } else if (key == "confound_strength") cfg.confound_strength = value.get<double>();
    else if (key == "confound_contrast") cfg.confound_contrast = value.get<double>();
    else if (key == "baseline_jitter_log_sd") cfg.baseline_jitter_log_sd = value.get<double>();
    else if (key == "patient_amp_log_sd") cfg.patient_amp_log_sd = value.get<double>();
    else if (key == "spot_amp_log_sd") cfg.spot_amp_log_sd = value.get<double>();
    else if (key == "noise_sd") cfg.noise_sd = value.get<double>();
    else throw ConfigError("synth config: unknown key '" + key + "'");
  }
  return cfg;
}

SynthConfig load_synth_config(const std::filesystem::path& path) {
  return synth_config_from_json(io::read_file(path));
}

std::vector<std::pair<double, double>> isotopic_envelope(double mono_mass_da, double amplitude,
                                                         int peaks, double decay) {
  std::vector<std::pair<double, double>> out;
  out.reserve(static_cast<size_t>(peaks));
  double a = amplitude;
  for (int k = 0; k < peaks; ++k) {
    out.emplace_back(mono_mass_da + k * kIsotopeSpacingDa, a);
    a *= decay;
  }
  return out;
}

namespace {

void validate(const SynthConfig& cfg) {
  if (cfg.patients_per_class < 1) throw ConfigError("synth: patients_per_class must be >= 1");
  if (cfg.spots_min < 1 || cfg.spots_max < cfg.spots_min)
    throw ConfigError("synth: invalid spots range");
  if (cfg.bins < 2 || !(cfg.mz_step > 0.0)) throw ConfigError("synth: invalid m/z axis");
  if (cfg.confound_strength < 0.0 || cfg.confound_strength > 1.0)
    throw ConfigError("synth: confound_strength must lie in [0, 1]");
  if (cfg.envelope_peaks < 1) throw ConfigError("synth: envelope_peaks must be >= 1");
  if (!(cfg.peak_sigma_da > 0.0)) throw ConfigError("synth: peak_sigma_da must be positive");
  if (cfg.noise_sd < 0.0) throw ConfigError("synth: noise_sd must be nonnegative");
  const double mz_end = cfg.mz_start + cfg.mz_step * cfg.bins;
  for (const PeakSet* ps : {&cfg.class_peaks[0], &cfg.class_peaks[1], &cfg.background_peaks})
    for (double p : ps->positions_da)
      if (p < cfg.mz_start || p > mz_end)
        throw ConfigError("synth: peak position " + std::to_string(p) +
                          " outside the m/z range");
  if (cfg.labs[0].id == cfg.labs[1].id) throw ConfigError("synth: labs must have distinct ids");
}

// adds a Gaussian bump (peak height = amp) over its +-4 sigma window
void add_peak(Vector& intensities, const SynthConfig& cfg, double center_da, double amp,
              double sigma) {
  const double lo = center_da - 4.0 * sigma;
  const double hi = center_da + 4.0 * sigma;
  int b0 = static_cast<int>(std::floor((lo - cfg.mz_start) / cfg.mz_step));
  int b1 = static_cast<int>(std::ceil((hi - cfg.mz_start) / cfg.mz_step));
  b0 = std::max(b0, 0);
  b1 = std::min(b1, cfg.bins - 1);
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  for (int b = b0; b <= b1; ++b) {
    const double d = cfg.mz_start + cfg.mz_step * b - center_da;
    intensities(b) += amp * std::exp(-d * d * inv2s2);
  }
}

struct PatientInfo {
  std::string id;
  int label;
  std::vector<double> class_peak_mult;  // per class biomarker
  std::vector<double> background_mult;  // per background peak
};

}  // namespace

Cohort generate_cohort(const SynthConfig& cfg) {
  validate(cfg);

  Cohort cohort;
  cohort.mz_start = cfg.mz_start;
  cohort.mz_step = cfg.mz_step;
  cohort.n = cfg.bins;
  cohort.class_names = {"class0", "class1"};

  // patient-level biology, shared across labs
  std::vector<PatientInfo> patients;
  for (int label = 0; label < 2; ++label) {
    for (int p = 0; p < cfg.patients_per_class; ++p) {
      PatientInfo info;
      const int global = label * cfg.patients_per_class + p;
      std::ostringstream id;
      id << 'p' << (global < 100 ? (global < 10 ? "00" : "0") : "") << global;
      info.id = id.str();
      info.label = label;
      Rng rng(mix_seed(mix_seed(cfg.seed, 0xBA5E), hash_str(info.id)));
      for (size_t k = 0; k < cfg.class_peaks[label].positions_da.size(); ++k)
        info.class_peak_mult.push_back(std::exp(rng.normal(0.0, cfg.patient_amp_log_sd)));
      for (size_t k = 0; k < cfg.background_peaks.positions_da.size(); ++k)
        info.background_mult.push_back(std::exp(rng.normal(0.0, cfg.patient_amp_log_sd)));
      patients.push_back(std::move(info));
    }
  }

  for (int lab_i = 0; lab_i < 2; ++lab_i) {
    const LabProfile& lab = cfg.labs[lab_i];
    const double sigma = cfg.peak_sigma_da * lab.peak_sigma_scale;
    for (const PatientInfo& patient : patients) {
      Rng spot_count_rng(
          mix_seed(mix_seed(mix_seed(cfg.seed, 0x0C07), hash_str(lab.id)), hash_str(patient.id)));
      const int spots =
          static_cast<int>(spot_count_rng.uniform_int(cfg.spots_min, cfg.spots_max));

      // the confounder: baseline amplitude couples to the class with opposite
      // sign in the two labs
      const int favored = (lab_i == 0) ? 0 : 1;
      const double coupling =
          1.0 + cfg.confound_strength * cfg.confound_contrast * (patient.label == favored ? 1.0 : -1.0);

      for (int spot = 0; spot < spots; ++spot) {
        Rng rng(mix_seed(
            mix_seed(mix_seed(mix_seed(cfg.seed, 0x5107), hash_str(lab.id)), hash_str(patient.id)),
            static_cast<uint64_t>(spot)));

        Vector v = Vector::Zero(cfg.bins);

        // (a) lab baseline, confounded
        const double base_amp = lab.baseline_amplitude * coupling *
                                std::exp(rng.normal(0.0, cfg.baseline_jitter_log_sd));
        for (int b = 0; b < cfg.bins; ++b) {
          const double mz = cfg.mz_start + cfg.mz_step * b;
          v(b) += base_amp * std::exp(-(mz - cfg.mz_start) / lab.baseline_decay_da);
        }

        // (b) class biomarkers with isotopic envelopes
        const PeakSet& peaks = cfg.class_peaks[patient.label];
        for (size_t k = 0; k < peaks.positions_da.size(); ++k) {
          const double amp = peaks.amplitudes[k] * patient.class_peak_mult[k] *
                             std::exp(rng.normal(0.0, cfg.spot_amp_log_sd));
          for (const auto& [pos, a] :
               isotopic_envelope(peaks.positions_da[k] + lab.mz_shift_da, amp,
                                 cfg.envelope_peaks, cfg.envelope_decay))
            add_peak(v, cfg, pos, a, sigma);
        }

        // (c) shared background peaks
        for (size_t k = 0; k < cfg.background_peaks.positions_da.size(); ++k) {
          const double amp = cfg.background_peaks.amplitudes[k] * patient.background_mult[k] *
                             std::exp(rng.normal(0.0, cfg.spot_amp_log_sd));
          for (const auto& [pos, a] :
               isotopic_envelope(cfg.background_peaks.positions_da[k] + lab.mz_shift_da, amp,
                                 cfg.envelope_peaks, cfg.envelope_decay))
            add_peak(v, cfg, pos, a, sigma);
        }

        // (d) nonnegative floor noise
        for (int b = 0; b < cfg.bins; ++b) v(b) += std::max(0.0, rng.normal(0.0, cfg.noise_sd));

        CohortSample sample;
        std::ostringstream sid;
        sid << lab.id << '_' << patient.id << "_s" << (spot < 10 ? "0" : "") << spot;
        sample.sample_id = sid.str();
        sample.patient_id = patient.id;
        sample.lab_id = lab.id;
        sample.label = patient.label;
        sample.spectrum = tic_normalize({v, cfg.mz_start, cfg.mz_step});
        cohort.samples.push_back(std::move(sample));
      }
    }
  }
  return cohort;
}

// --- disk format --------------------------------------------------------------

void export_cohort(const Cohort& cohort, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json meta;
  meta["mz_start"] = cohort.mz_start;
  meta["mz_step"] = cohort.mz_step;
  meta["n"] = cohort.n;
  meta["class_names"] = cohort.class_names;
  nlohmann::ordered_json records;
  for (const CohortSample& s : cohort.samples) {
    nlohmann::ordered_json r;
    r["patient_id"] = s.patient_id;
    r["lab_id"] = s.lab_id;
    r["label"] = s.label;
    records[s.sample_id] = r;
  }
  meta["records"] = records;
  io::write_file(dir / "meta.json", meta.dump(1) + "\n");

  std::string csv;
  csv.reserve(cohort.samples.size() * (static_cast<size_t>(cohort.n) * 20 + 32));
  for (const CohortSample& s : cohort.samples) {
    csv += s.sample_id;
    for (Eigen::Index b = 0; b < s.spectrum.intensities.size(); ++b) {
      csv += ',';
      csv += io::fmt_double(s.spectrum.intensities(b));
    }
    csv += '\n';
  }
  io::write_file(dir / "intensities.csv", csv);
}

Cohort import_cohort(const std::filesystem::path& dir) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(io::read_file(dir / "meta.json"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("cohort meta.json: " + std::string(e.what()));
  }
  Cohort cohort;
  try {
    cohort.mz_start = meta.at("mz_start").get<double>();
    cohort.mz_step = meta.at("mz_step").get<double>();
    cohort.n = meta.at("n").get<int>();
    cohort.class_names = meta.at("class_names").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("cohort meta.json: " + std::string(e.what()));
  }
  const auto& records = meta.at("records");

  std::map<std::string, int> patient_label;
  const auto rows = io::read_csv(dir / "intensities.csv");
  cohort.samples.reserve(rows.size());
  std::set<std::string> seen_ids;
  for (const auto& row : rows) {
    if (row.size() != static_cast<size_t>(cohort.n) + 1)
      throw DataError("cohort intensities.csv: record '" + (row.empty() ? "?" : row[0]) +
                      "' has " + std::to_string(row.size() - 1) + " values, expected " +
                      std::to_string(cohort.n));
    CohortSample s;
    s.sample_id = row[0];
    if (!seen_ids.insert(s.sample_id).second)
      throw DataError("cohort intensities.csv: duplicate sample id '" + s.sample_id + "'");
    if (!records.contains(s.sample_id))
      throw DataError("cohort meta.json: no record for sample '" + s.sample_id + "'");
    const auto& r = records.at(s.sample_id);
    if (!r.contains("patient_id"))
      throw DataError("cohort meta.json: record '" + s.sample_id + "' is missing patient_id");
    if (!r.contains("lab_id") || !r.contains("label"))
      throw DataError("cohort meta.json: record '" + s.sample_id + "' is missing lab_id/label");
    s.patient_id = r.at("patient_id").get<std::string>();
    s.lab_id = r.at("lab_id").get<std::string>();
    s.label = r.at("label").get<int>();
    if (s.label < 0 || s.label >= static_cast<int>(cohort.class_names.size()))
      throw DataError("cohort meta.json: record '" + s.sample_id + "' has label out of range");

    const auto [it, inserted] = patient_label.emplace(s.patient_id, s.label);
    if (!inserted && it->second != s.label)
      throw DataError("cohort: patient '" + s.patient_id + "' appears with two labels");

    Vector v(cohort.n);
    for (int b = 0; b < cohort.n; ++b) v(b) = io::parse_double(row[static_cast<size_t>(b) + 1]);
    s.spectrum = {v, cohort.mz_start, cohort.mz_step};
    cohort.samples.push_back(std::move(s));
  }
  if (cohort.samples.size() != records.size())
    throw DataError("cohort: meta.json lists " + std::to_string(records.size()) +
                    " records but intensities.csv has " + std::to_string(cohort.samples.size()));
  return cohort;
}

}  // namespace drr
