#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "drr/cohort.hpp"
#include "drr/errors.hpp"
#include "drr/eval.hpp"
#include "drr/io.hpp"

using namespace drr;

namespace {

// shared default cohort; generating it once keeps the suite fast
const Cohort& default_cohort() {
  static const Cohort cohort = generate_cohort(SynthConfig{});
  return cohort;
}

// bins of the peak-free high-mass window (1850..2000 Da by default); only
// the noise floor and the baseline tail live here
std::pair<int, int> quiet_window(const Cohort& c) {
  const int lo = static_cast<int>((1850.0 - c.mz_start) / c.mz_step);
  return {lo, c.n - 1};
}

// bins of the baseline-dominated low-mass window (800..1000 Da)
std::pair<int, int> baseline_window(const Cohort& c) {
  return {0, static_cast<int>((1000.0 - c.mz_start) / c.mz_step)};
}

double window_mean(const Spectrum& s, std::pair<int, int> win) {
  return s.intensities.segment(win.first, win.second - win.first + 1).mean();
}

}  // namespace

TEST_CASE("isotopic envelope") {
  const auto env = isotopic_envelope(1000.0, 1.0, 4, 0.5);
  REQUIRE(env.size() == 4);
  CHECK(env[0].second == 1.0);
  CHECK(env[1].second == 0.5);
  CHECK(env[2].second == 0.25);
  CHECK(env[3].second == 0.125);
  for (size_t k = 0; k < env.size(); ++k)
    CHECK(env[k].first == doctest::Approx(1000.0 + 1.00335 * static_cast<double>(k)).epsilon(1e-12));

  double total = 0.0;
  for (const auto& [pos, amp] : env) total += amp;
  CHECK(total == doctest::Approx(1.0 + 0.5 + 0.25 + 0.125).epsilon(1e-14));
}

TEST_CASE("generation is a pure function of the config") {
  SynthConfig cfg;
  cfg.patients_per_class = 3;
  cfg.spots_min = 2;
  cfg.spots_max = 4;
  const Cohort a = generate_cohort(cfg);
  const Cohort b = generate_cohort(cfg);
  REQUIRE(a.samples.size() == b.samples.size());
  for (size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].sample_id == b.samples[i].sample_id);
    for (int j = 0; j < a.n; ++j)
      CHECK(a.samples[i].spectrum.intensities(j) == b.samples[i].spectrum.intensities(j));
  }
}

TEST_CASE("every spectrum is TIC-normalized and patients keep one label") {
  const Cohort& c = default_cohort();
  std::map<std::string, int> patient_label;
  std::map<std::string, std::set<std::string>> patient_labs;
  for (const CohortSample& s : c.samples) {
    CHECK(s.spectrum.intensities.sum() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK((s.spectrum.intensities.array() >= 0.0).all());
    const auto [it, fresh] = patient_label.emplace(s.patient_id, s.label);
    if (!fresh) CHECK(it->second == s.label);
    patient_labs[s.patient_id].insert(s.lab_id);
  }
  // each patient is measured in both labs
  for (const auto& [patient, labs] : patient_labs) CHECK(labs.size() == 2);
}

TEST_CASE("class-mean spectra separate at the biomarker bins") {
  const Cohort& c = default_cohort();
  const SynthConfig cfg;
  Vector mean0 = Vector::Zero(c.n), mean1 = Vector::Zero(c.n);
  int n0 = 0, n1 = 0;
  for (const CohortSample& s : c.samples) {
    if (s.label == 0) {
      mean0 += s.spectrum.intensities;
      ++n0;
    } else {
      mean1 += s.spectrum.intensities;
      ++n1;
    }
  }
  mean0 /= n0;
  mean1 /= n1;

  // per-bin standard deviation in the peak-free window, as the noise scale
  const auto win = quiet_window(c);
  double noise_sd = 0.0;
  int count = 0;
  for (int b = win.first; b <= win.second; b += 7) {
    double m = 0.0, m2 = 0.0;
    for (const CohortSample& s : c.samples) {
      m += s.spectrum.intensities(b);
      m2 += s.spectrum.intensities(b) * s.spectrum.intensities(b);
    }
    m /= static_cast<double>(c.samples.size());
    noise_sd += std::sqrt(std::max(0.0, m2 / static_cast<double>(c.samples.size()) - m * m));
    ++count;
  }
  noise_sd /= count;

  for (int cls = 0; cls < 2; ++cls) {
    const Vector& own = cls == 0 ? mean0 : mean1;
    const Vector& other = cls == 0 ? mean1 : mean0;
    for (double pos : cfg.class_peaks[static_cast<size_t>(cls)].positions_da) {
      const int bin = static_cast<int>(std::llround((pos - c.mz_start) / c.mz_step));
      CHECK(own(bin) - other(bin) >= 5.0 * noise_sd);
    }
  }
}

TEST_CASE("zero confounding leaves the baseline class-neutral, full reverses across labs") {
  SynthConfig cfg;
  cfg.patients_per_class = 8;
  cfg.spots_min = 6;
  cfg.spots_max = 10;
  cfg.seed = 5;

  const auto class_gap = [&](const Cohort& c, const std::string& lab) {
    const auto win = baseline_window(c);
    double m0 = 0, m1 = 0;
    int k0 = 0, k1 = 0;
    for (const CohortSample& s : c.samples) {
      if (s.lab_id != lab) continue;
      const double f = window_mean(s.spectrum, win);
      if (s.label == 0) {
        m0 += f;
        ++k0;
      } else {
        m1 += f;
        ++k1;
      }
    }
    return m0 / k0 - m1 / k1;
  };

  cfg.confound_strength = 0.0;
  const Cohort neutral = generate_cohort(cfg);
  cfg.confound_strength = 0.8;
  const Cohort confounded = generate_cohort(cfg);

  const double gap_hb = class_gap(confounded, "HB");
  const double gap_tr = class_gap(confounded, "TR");
  CHECK(gap_hb > 0.0);
  CHECK(gap_tr < 0.0);  // the coupling reverses between labs
  CHECK(std::abs(class_gap(neutral, "HB")) < 0.1 * std::abs(gap_hb));
  CHECK(std::abs(class_gap(neutral, "TR")) < 0.1 * std::abs(gap_tr));
}

TEST_CASE("a naive baseline-integral classifier is fooled across labs") {
  const Cohort& c = default_cohort();
  const auto win = baseline_window(c);

  // threshold on the baseline-region mean, fit on HB
  double m0 = 0, m1 = 0;
  int k0 = 0, k1 = 0;
  for (const CohortSample& s : c.samples) {
    if (s.lab_id != "HB") continue;
    const double f = window_mean(s.spectrum, win);
    (s.label == 0 ? m0 : m1) += f;
    (s.label == 0 ? k0 : k1) += 1;
  }
  m0 /= k0;
  m1 /= k1;
  const double threshold = 0.5 * (m0 + m1);
  const bool class0_above = m0 > m1;

  const auto score_lab = [&](const std::string& lab) {
    std::vector<int> pred, truth;
    for (const CohortSample& s : c.samples) {
      if (s.lab_id != lab) continue;
      const bool above = window_mean(s.spectrum, win) > threshold;
      pred.push_back(above == class0_above ? 0 : 1);
      truth.push_back(s.label);
    }
    return balanced_accuracy(pred, truth);
  };

  CHECK(score_lab("HB") > 0.8);
  CHECK(score_lab("TR") < 0.55);
}

TEST_CASE("export and import round-trip bit-exactly") {
  SynthConfig cfg;
  cfg.patients_per_class = 2;
  cfg.spots_min = 2;
  cfg.spots_max = 3;
  const Cohort a = generate_cohort(cfg);
  const auto dir = std::filesystem::temp_directory_path() / "drr_cohort_roundtrip";
  export_cohort(a, dir);
  const Cohort b = import_cohort(dir);
  REQUIRE(a.samples.size() == b.samples.size());
  CHECK(a.mz_start == b.mz_start);
  CHECK(a.mz_step == b.mz_step);
  for (size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].sample_id == b.samples[i].sample_id);
    CHECK(a.samples[i].patient_id == b.samples[i].patient_id);
    CHECK(a.samples[i].lab_id == b.samples[i].lab_id);
    CHECK(a.samples[i].label == b.samples[i].label);
    for (int j = 0; j < a.n; ++j)
      CHECK(a.samples[i].spectrum.intensities(j) == b.samples[i].spectrum.intensities(j));
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("same seed twice writes byte-identical files") {
  SynthConfig cfg;
  cfg.patients_per_class = 2;
  cfg.spots_min = 2;
  cfg.spots_max = 3;
  const auto d1 = std::filesystem::temp_directory_path() / "drr_cohort_d1";
  const auto d2 = std::filesystem::temp_directory_path() / "drr_cohort_d2";
  export_cohort(generate_cohort(cfg), d1);
  export_cohort(generate_cohort(cfg), d2);
  CHECK(io::read_file(d1 / "meta.json") == io::read_file(d2 / "meta.json"));
  CHECK(io::read_file(d1 / "intensities.csv") == io::read_file(d2 / "intensities.csv"));
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}

TEST_CASE("malformed cohort files are rejected with the offending record") {
  SynthConfig cfg;
  cfg.patients_per_class = 2;
  cfg.spots_min = 2;
  cfg.spots_max = 2;
  const Cohort a = generate_cohort(cfg);
  const auto dir = std::filesystem::temp_directory_path() / "drr_cohort_bad";

  SUBCASE("truncated intensity row") {
    export_cohort(a, dir);
    std::string csv = io::read_file(dir / "intensities.csv");
    csv = csv.substr(0, csv.find('\n') - 40) + "\n" + csv.substr(csv.find('\n') + 1);
    io::write_file(dir / "intensities.csv", csv);
    CHECK_THROWS_WITH_AS(import_cohort(dir), doctest::Contains(a.samples[0].sample_id.c_str()),
                         DataError);
  }
  SUBCASE("missing patient_id") {
    export_cohort(a, dir);
    std::string meta = io::read_file(dir / "meta.json");
    const size_t pos = meta.find("patient_id");
    meta.replace(pos, 10, "patient_xx");
    io::write_file(dir / "meta.json", meta);
    CHECK_THROWS_WITH_AS(import_cohort(dir), doctest::Contains("patient_id"), DataError);
  }
  SUBCASE("unknown sample id") {
    export_cohort(a, dir);
    std::string csv = io::read_file(dir / "intensities.csv");
    csv.replace(0, a.samples[0].sample_id.size(), "zz_mystery_s0");
    io::write_file(dir / "intensities.csv", csv);
    CHECK_THROWS_AS(import_cohort(dir), DataError);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("config validation") {
  SynthConfig cfg;
  SUBCASE("confound strength outside [0,1]") {
    cfg.confound_strength = 1.5;
    CHECK_THROWS_AS(generate_cohort(cfg), ConfigError);
  }
  SUBCASE("peaks outside the axis") {
    cfg.class_peaks[0].positions_da.push_back(5000.0);
    CHECK_THROWS_AS(generate_cohort(cfg), ConfigError);
  }
  SUBCASE("bad spot range") {
    cfg.spots_min = 5;
    cfg.spots_max = 3;
    CHECK_THROWS_AS(generate_cohort(cfg), ConfigError);
  }
}

TEST_CASE("synth config JSON round trip") {
  SynthConfig cfg;
  cfg.seed = 99;
  cfg.confound_strength = 0.3;
  cfg.labs[1].mz_shift_da = 0.4;
  const SynthConfig back = synth_config_from_json(synth_config_to_json(cfg));
  CHECK(back.seed == 99);
  CHECK(back.confound_strength == 0.3);
  CHECK(back.labs[1].mz_shift_da == 0.4);
  CHECK(back.class_peaks[0].positions_da == cfg.class_peaks[0].positions_da);
  CHECK_THROWS_AS(synth_config_from_json("{\"bogus\":1}"), ConfigError);
}
