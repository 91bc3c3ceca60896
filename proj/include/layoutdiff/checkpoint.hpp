#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "layoutdiff/errors.hpp"
#include "layoutdiff/ldit.hpp"
#include "layoutdiff/optimizer.hpp"
#include "layoutdiff/rng.hpp"
#include "layoutdiff/schedule.hpp"

namespace layoutdiff {

// Checkpoint layout: "LDCP" magic, u32 version, u64 header length, JSON
// header (config echo, schedule, vocabulary, tensor manifest), then all
// tensor payloads as little-endian float64 in manifest order, followed by
// ADAM first/second moments when the optimizer state is included.
inline constexpr char kCheckpointMagic[4] = {'L', 'D', 'C', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    LDiTConfig config;
    int schedule_steps = 0;
    double schedule_scale = 1.0;
    ScheduleFamily schedule_family = ScheduleFamily::linear_beta;
    std::uint64_t vocab_hash = 0;
    std::vector<std::string> vocabulary;
    int encoder_buckets = 0;
    std::uint64_t encoder_seed = 0;
    bool encoder_trainable = true;
    long train_step = 0;
    bool has_optimizer = false;
    long optimizer_step = 0;
};

namespace detail {

inline void write_f64(std::ofstream& out, const std::vector<double>& buf) {
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(double)));
}

template <class S>
void write_tensor(std::ofstream& out, const nn::Mat<S>& m) {
    std::vector<double> buf(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<double>(m(i));
    write_f64(out, buf);
}

template <class S>
void read_tensor(std::ifstream& in, nn::Mat<S>& m) {
    std::vector<double> buf(static_cast<std::size_t>(m.size()));
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(double)));
    if (!in) throw ParseError("checkpoint truncated while reading tensor data");
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = static_cast<S>(buf[static_cast<std::size_t>(i)]);
}

}  // namespace detail

template <class S>
void save_checkpoint(const std::string& path, const LDiT<S>& model, const NoiseSchedule& schedule,
                     const CheckpointMeta& meta_in, const Adam<S>* optimizer = nullptr) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    nlohmann::json header;
    header["config"] = model.config().to_json();
    header["schedule"] = {{"steps", schedule.steps},
                          {"scale", schedule.scale},
                          {"family", to_string(schedule.family)}};
    header["vocab_hash"] = model.encoder()->vocabulary_hash();
    header["vocabulary"] = meta_in.vocabulary;
    header["encoder_buckets"] = meta_in.encoder_buckets;
    header["encoder_seed"] = meta_in.encoder_seed;
    header["encoder_trainable"] = meta_in.encoder_trainable;
    header["train_step"] = meta_in.train_step;
    header["has_optimizer"] = optimizer != nullptr;
    header["optimizer_step"] = optimizer ? optimizer->step_count : 0;
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto* p : model.parameters()) {
        manifest.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
    }
    header["tensors"] = manifest;
    const std::string header_str = header.dump();
    out.write(kCheckpointMagic, 4);
    const std::uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t header_len = header_str.size();
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto* p : model.parameters()) detail::write_tensor(out, p->value);
    if (optimizer) {
        for (const auto& m : optimizer->m) detail::write_tensor(out, m);
        for (const auto& v : optimizer->v) detail::write_tensor(out, v);
    }
    if (!out) throw Error("failed writing checkpoint '" + path + "'");
}

// Header only; lets callers rebuild the encoder and model before loading.
inline CheckpointMeta peek_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingCheckpointError("cannot open checkpoint '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw ParseError("'" + path + "' is not a checkpoint file");
    }
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (version != kCheckpointVersion) {
        throw CheckpointMismatchError("unsupported checkpoint version " + std::to_string(version));
    }
    std::uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    std::string header_str(header_len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw ParseError("checkpoint header truncated");
    nlohmann::json header = nlohmann::json::parse(header_str);
    CheckpointMeta meta;
    meta.config = LDiTConfig::from_json(header.at("config"));
    meta.schedule_steps = header.at("schedule").at("steps").get<int>();
    meta.schedule_scale = header.at("schedule").at("scale").get<double>();
    meta.schedule_family = schedule_family_from_string(header.at("schedule").at("family").get<std::string>());
    meta.vocab_hash = header.at("vocab_hash").get<std::uint64_t>();
    meta.vocabulary = header.at("vocabulary").get<std::vector<std::string>>();
    meta.encoder_buckets = header.at("encoder_buckets").get<int>();
    meta.encoder_seed = header.at("encoder_seed").get<std::uint64_t>();
    meta.encoder_trainable = header.at("encoder_trainable").get<bool>();
    meta.train_step = header.at("train_step").get<long>();
    meta.has_optimizer = header.at("has_optimizer").get<bool>();
    meta.optimizer_step = header.at("optimizer_step").get<long>();
    return meta;
}

// Loads weights into an already-constructed model. Refuses to load when the
// model config, schedule, or encoder vocabulary disagree with the file.
template <class S>
CheckpointMeta load_checkpoint(const std::string& path, LDiT<S>& model, const NoiseSchedule& schedule,
                               Adam<S>* optimizer = nullptr) {
    const CheckpointMeta meta = peek_checkpoint(path);
    if (!(meta.config == model.config())) {
        throw CheckpointMismatchError("checkpoint config does not match the constructed model");
    }
    if (meta.schedule_steps != schedule.steps || meta.schedule_scale != schedule.scale ||
        meta.schedule_family != schedule.family) {
        throw CheckpointMismatchError("checkpoint schedule does not match");
    }
    if (meta.vocab_hash != model.encoder()->vocabulary_hash()) {
        throw CheckpointMismatchError("checkpoint vocabulary hash does not match the encoder");
    }
    std::ifstream in(path, std::ios::binary);
    std::uint32_t version;
    std::uint64_t header_len;
    char magic[4];
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    in.seekg(static_cast<std::streamoff>(header_len), std::ios::cur);
    for (auto* p : model.parameters()) detail::read_tensor(in, p->value);
    if (optimizer) {
        if (!meta.has_optimizer) {
            throw CheckpointMismatchError("checkpoint has no optimizer state");
        }
        optimizer->init(model.parameters());
        for (auto& m : optimizer->m) detail::read_tensor(in, m);
        for (auto& v : optimizer->v) detail::read_tensor(in, v);
        optimizer->step_count = meta.optimizer_step;
    }
    return meta;
}

inline std::string file_content_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot hash missing file '" + path + "'");
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
        if (!in) break;
    }
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
    return std::string(hex);
}

}  // namespace layoutdiff
