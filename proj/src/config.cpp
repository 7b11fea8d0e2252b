#include "eqkd/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "eqkd/rng.hpp"

namespace eqkd {

namespace {

struct FieldRef {
    enum class Type { F64, U32, U16, Str, Bool } type;
    void* ptr;
};

// Schema: all recognized "section.key" entries mapped onto the struct fields.
std::map<std::string, FieldRef> make_schema(SimConfig& c) {
    using T = FieldRef::Type;
    return {
        {"source.mu", {T::F64, &c.source.mu}},
        {"source.window_ps", {T::F64, &c.source.window_ps}},
        {"source.visibility", {T::F64, &c.source.visibility}},
        {"source.basis_prob_z", {T::F64, &c.source.basis_prob_z}},
        {"source.phase_a_rad", {T::F64, &c.source.phase_a_rad}},
        {"source.phase_b_rad", {T::F64, &c.source.phase_b_rad}},
        {"source.intrinsic_error_z", {T::F64, &c.source.intrinsic_error_z}},
        {"source.light_on_time_s", {T::F64, &c.source.light_on_time_s}},
        {"source.alice_z_passive", {T::Bool, &c.source.alice_z_passive}},
        {"source.tau_delay_ps", {T::F64, &c.coherence.tau_delay_ps}},
        {"source.tau_coh_single_ps", {T::F64, &c.coherence.tau_coh_single_ps}},
        {"source.tau_coh_pump_ps", {T::F64, &c.coherence.tau_coh_pump_ps}},
        {"source.tau_mismatch_ps", {T::F64, &c.coherence.tau_mismatch_ps}},
        {"losses.az_db", {T::F64, &c.losses.az_db}},
        {"losses.ax1_db", {T::F64, &c.losses.ax1_db}},
        {"losses.ax2_db", {T::F64, &c.losses.ax2_db}},
        {"losses.bz1_db", {T::F64, &c.losses.bz1_db}},
        {"losses.bz2_db", {T::F64, &c.losses.bz2_db}},
        {"losses.bx1_db", {T::F64, &c.losses.bx1_db}},
        {"losses.bx2_db", {T::F64, &c.losses.bx2_db}},
        {"detectors.efficiency", {T::F64, &c.detectors.efficiency}},
        {"detectors.dead_time_ps", {T::F64, &c.detectors.dead_time_ps}},
        {"detectors.jitter_sigma_ps", {T::F64, &c.detectors.jitter_sigma_ps}},
        {"detectors.dark_rate_hz", {T::F64, &c.detectors.dark_rate_hz}},
        {"detectors.dispersion_jitter_ps", {T::F64, &c.detectors.dispersion_jitter_ps}},
        {"clock.offset_ps", {T::F64, &c.clock.offset_ps}},
        {"clock.skew_ps_per_s", {T::F64, &c.clock.skew_ps_per_s}},
        {"clock.skew_random_walk_ps_per_s", {T::F64, &c.clock.skew_random_walk_ps_per_s}},
        {"distillation.n_ec", {T::U32, &c.distill.n_ec}},
        {"distillation.k_blocks", {T::U32, &c.distill.k_blocks}},
        {"distillation.f_ec_target", {T::F64, &c.distill.f_ec_target}},
        {"distillation.eps_pe", {T::F64, &c.distill.eps_pe}},
        {"distillation.eps_hash", {T::F64, &c.distill.eps_hash}},
        {"distillation.qber_abort", {T::F64, &c.distill.qber_abort}},
        {"distillation.cascade_q_bootstrap", {T::F64, &c.distill.cascade_q_bootstrap}},
        {"distillation.x_stats_floor", {T::U32, &c.distill.x_stats_floor}},
        {"network.listen_addr", {T::Str, &c.network.listen_addr}},
        {"network.port", {T::U16, &c.network.port}},
        {"network.connect_host", {T::Str, &c.network.connect_host}},
        {"network.queue_depth", {T::U32, &c.network.queue_depth}},
        {"network.metrics_path", {T::Str, &c.network.metrics_path}},
        {"network.rate_gate_factor", {T::F64, &c.network.rate_gate_factor}},
        {"network.rate_gate_consecutive_ms", {T::U32, &c.network.rate_gate_consecutive_ms}},
        {"security.mac_algo", {T::Str, &c.security.mac_algo}},
        {"security.mac_key_hex", {T::Str, &c.security.mac_key_hex}},
    };
}

std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

void assign(const std::string& key, const FieldRef& f, const std::string& raw) {
    const std::string val = trim(raw);
    auto bad = [&] {
        throw ConfigError(ConfigErrorKind::TypeMismatch,
                          "bad value for " + key + ": '" + val + "'");
    };
    switch (f.type) {
        case FieldRef::Type::F64: {
            if (val == "inf" || val == "+inf") {
                *static_cast<double*>(f.ptr) = std::numeric_limits<double>::infinity();
                return;
            }
            try {
                std::size_t pos = 0;
                double d = std::stod(val, &pos);
                if (pos != val.size()) bad();
                *static_cast<double*>(f.ptr) = d;
            } catch (const std::exception&) {
                bad();
            }
            return;
        }
        case FieldRef::Type::U32:
        case FieldRef::Type::U16: {
            std::uint64_t v = 0;
            auto [p, ec] = std::from_chars(val.data(), val.data() + val.size(), v);
            if (ec != std::errc{} || p != val.data() + val.size()) bad();
            if (f.type == FieldRef::Type::U32) {
                if (v > 0xffffffffULL) bad();
                *static_cast<std::uint32_t*>(f.ptr) = static_cast<std::uint32_t>(v);
            } else {
                if (v > 0xffffULL) bad();
                *static_cast<std::uint16_t*>(f.ptr) = static_cast<std::uint16_t>(v);
            }
            return;
        }
        case FieldRef::Type::Str:
            *static_cast<std::string*>(f.ptr) = val;
            return;
        case FieldRef::Type::Bool: {
            if (val == "true" || val == "1") *static_cast<bool*>(f.ptr) = true;
            else if (val == "false" || val == "0") *static_cast<bool*>(f.ptr) = false;
            else bad();
            return;
        }
    }
}

void require_nonneg(double v, const char* name) {
    if (std::isnan(v) || v < 0.0)
        throw ConfigError(ConfigErrorKind::NegativeParameter,
                          std::string(name) + " must be non-negative");
}

} // namespace

void SimConfig::validate() {
    // Eq. 1: tau_coh_single < tau_delay < tau_coh_pump (strict).
    if (!(coherence.tau_coh_single_ps < coherence.tau_delay_ps &&
          coherence.tau_delay_ps < coherence.tau_coh_pump_ps)) {
        throw ConfigError(ConfigErrorKind::EqOneViolation,
                          "interferometer delay must satisfy tau_coh_single < tau < tau_coh_pump");
    }
    require_nonneg(source.mu, "source.mu");
    require_nonneg(coherence.tau_mismatch_ps, "source.tau_mismatch_ps");
    if (source.window_ps <= 0)
        throw ConfigError(ConfigErrorKind::NegativeParameter, "source.window_ps must be > 0");
    if (source.visibility < 0 || source.visibility > 1)
        throw ConfigError(ConfigErrorKind::NegativeParameter, "source.visibility must be in [0,1]");
    if (source.basis_prob_z < 0 || source.basis_prob_z > 1)
        throw ConfigError(ConfigErrorKind::NegativeParameter, "source.basis_prob_z must be in [0,1]");
    require_nonneg(source.intrinsic_error_z, "source.intrinsic_error_z");
    if (detectors.efficiency < 0 || detectors.efficiency > 1)
        throw ConfigError(ConfigErrorKind::NegativeParameter, "detectors.efficiency must be in [0,1]");
    require_nonneg(detectors.dead_time_ps, "detectors.dead_time_ps");
    require_nonneg(detectors.jitter_sigma_ps, "detectors.jitter_sigma_ps");
    require_nonneg(detectors.dark_rate_hz, "detectors.dark_rate_hz");
    require_nonneg(detectors.dispersion_jitter_ps, "detectors.dispersion_jitter_ps");
    for (int i = 0; i < kNumDetectors; ++i) {
        const double db = losses.db_for(static_cast<Detector>(i));
        if (std::isnan(db) || db < 0)
            throw ConfigError(ConfigErrorKind::NegativeParameter, "losses must be >= 0 dB");
    }
    if (distill.n_ec == 0 || distill.k_blocks == 0)
        throw ConfigError(ConfigErrorKind::NegativeParameter, "distillation block counts must be > 0");
    if (distill.eps_pe <= 0 || distill.eps_pe >= 1 || distill.eps_hash <= 0 || distill.eps_hash >= 1)
        throw ConfigError(ConfigErrorKind::NegativeParameter, "eps parameters must be in (0,1)");

    pair_rate_per_s = source.mu / source.window_ps * 1e12;
    for (int i = 0; i < kNumDetectors; ++i) {
        transmittance[i] = std::pow(10.0, -losses.db_for(static_cast<Detector>(i)) / 10.0);
        detect_prob[i] = transmittance[i] * detectors.efficiency;
    }
    const double per_det =
        std::sqrt(detectors.jitter_sigma_ps * detectors.jitter_sigma_ps +
                  detectors.dispersion_jitter_ps * detectors.dispersion_jitter_ps);
    sigma_rel_ps = std::sqrt(2.0) * per_det;
    capture_fraction =
        sigma_rel_ps > 0
            ? std::erf(source.window_ps / 2.0 / (sigma_rel_ps * std::sqrt(2.0)))
            : 1.0;
    // Interferometer mismatch degrades two-photon visibility smoothly
    // (Gaussian wave-packet overlap between the two arms).
    const double m = coherence.tau_mismatch_ps / coherence.tau_coh_single_ps;
    visibility_effective = source.visibility * std::exp(-m * m);
}

SimConfig validate_config(SimConfig cfg) {
    cfg.validate();
    return cfg;
}

std::string SimConfig::dump(bool with_provenance) const {
    // The schema holds non-const pointers; operate on a copy for dumping.
    SimConfig copy = *this;
    auto schema = make_schema(copy);
    std::ostringstream os;
    os.precision(17);
    std::string cur_section;
    for (const auto& [key, f] : schema) {
        const auto dot = key.find('.');
        const std::string section = key.substr(0, dot);
        if (section != cur_section) {
            os << "[" << section << "]\n";
            cur_section = section;
        }
        os << key.substr(dot + 1) << " = ";
        switch (f.type) {
            case FieldRef::Type::F64: os << *static_cast<double*>(f.ptr); break;
            case FieldRef::Type::U32: os << *static_cast<std::uint32_t*>(f.ptr); break;
            case FieldRef::Type::U16: os << *static_cast<std::uint16_t*>(f.ptr); break;
            case FieldRef::Type::Str: os << *static_cast<std::string*>(f.ptr); break;
            case FieldRef::Type::Bool: os << (*static_cast<bool*>(f.ptr) ? "true" : "false"); break;
        }
        if (with_provenance) {
            auto it = provenance.find(key);
            const char* p = "default";
            if (it != provenance.end()) {
                if (it->second == Provenance::File) p = "file";
                else if (it->second == Provenance::Flag) p = "flag";
            }
            os << "   # " << p;
        }
        os << "\n";
    }
    return os.str();
}

std::uint64_t SimConfig::hash() const {
    return fnv1a64(dump(false));
}

SimConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides) {
    SimConfig cfg;
    auto schema = make_schema(cfg);

    auto apply = [&](const std::string& key, const std::string& value, Provenance prov) {
        auto it = schema.find(key);
        if (it == schema.end())
            throw ConfigError(ConfigErrorKind::UnknownKey, "unknown config key: " + key);
        assign(key, it->second, value);
        cfg.provenance[key] = prov;
    };

    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        auto hash_pos = line.find('#');
        if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError(ConfigErrorKind::BadFile,
                                  "malformed section header at line " + std::to_string(lineno));
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(ConfigErrorKind::BadFile,
                              "expected key = value at line " + std::to_string(lineno));
        const std::string key = trim(line.substr(0, eq));
        if (section.empty())
            throw ConfigError(ConfigErrorKind::UnknownKey, "key outside any section: " + key);
        apply(section + "." + key, line.substr(eq + 1), Provenance::File);
    }

    for (const auto& ov : overrides) {
        auto eq = ov.find('=');
        if (eq == std::string::npos)
            throw ConfigError(ConfigErrorKind::BadFile, "override must be section.key=value: " + ov);
        apply(trim(ov.substr(0, eq)), ov.substr(eq + 1), Provenance::Flag);
    }

    cfg.validate();
    return cfg;
}

SimConfig parse_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::string text;
    if (!path.empty()) {
        std::ifstream f(path);
        if (!f) throw ConfigError(ConfigErrorKind::BadFile, "cannot open config file: " + path);
        std::ostringstream ss;
        ss << f.rdbuf();
        text = ss.str();
    }
    return parse_config_text(text, overrides);
}

} // namespace eqkd
