#include "vlmatch/checkpoint.hpp"

#include <cstring>

#include "binary_io.hpp"
#include "vlmatch/error.hpp"
#include "vlmatch/io.hpp"

namespace vlmatch {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[5] = "VLMT";
using detail::ByteReader;
using detail::ByteWriter;

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const ModelParams& params,
                                               const EncoderConfig& config,
                                               const nlohmann::json& meta) {
    nlohmann::json header = {{"config", config.to_json()},
                             {"frozen", std::vector<std::string>(params.frozen().begin(),
                                                                 params.frozen().end())},
                             {"meta", meta}};
    const std::string text = header.dump();
    ByteWriter w;
    w.bytes(kMagic, 4);
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put<std::uint64_t>(text.size());
    w.bytes(text.data(), text.size());
    const auto flat = params.flat();
    w.put<std::uint64_t>(flat.size());
    for (const auto& [name, t] : flat) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
        for (const auto d : t.shape()) w.put<std::uint64_t>(d);
        const auto v = t.data();
        w.bytes(v.data(), v.size() * sizeof(double));
    }
    return std::move(w.buf);
}

void save_checkpoint(const ModelParams& params, const EncoderConfig& config, const fs::path& path,
                     const nlohmann::json& meta) {
    write_file_atomic(path, serialize_checkpoint(params, config, meta));
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes, "checkpoint");
    r.expect_magic(kMagic);
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw VersionError("checkpoint: version " + std::to_string(version) + ", expected " +
                           std::to_string(kCheckpointVersion));
    }
    const auto hlen = r.get<std::uint64_t>();
    const auto htext = r.take(static_cast<std::size_t>(hlen));
    Checkpoint ck;
    std::vector<std::string> frozen;
    try {
        const auto header = nlohmann::json::parse(htext.begin(), htext.end());
        ck.config = EncoderConfig::from_json(header.at("config"));
        frozen = header.at("frozen").get<std::vector<std::string>>();
        ck.meta = header.value("meta", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
    } catch (const ValidationError& e) {
        throw FormatError(std::string("checkpoint: invalid config: ") + e.what());
    }
    const auto count = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto nlen = r.get<std::uint32_t>();
        const auto nb = r.take(nlen);
        const std::string name(nb.begin(), nb.end());
        const auto dot = name.find('.');
        if (dot == std::string::npos || dot == 0 || dot + 1 == name.size()) {
            throw FormatError("checkpoint: bad parameter name '" + name + "'");
        }
        const auto rank = r.get<std::uint32_t>();
        if (rank > 8) throw FormatError("checkpoint: implausible rank for " + name);
        Shape shape;
        std::uint64_t numel = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            const auto d = r.get<std::uint64_t>();
            if (d == 0 || d > (std::uint64_t{1} << 32)) throw FormatError("checkpoint: bad dim in " + name);
            shape.push_back(static_cast<std::size_t>(d));
            numel *= d;
            if (numel > (std::uint64_t{1} << 34)) throw FormatError("checkpoint: tensor too large");
        }
        const auto raw = r.take(static_cast<std::size_t>(numel * sizeof(double)));
        std::vector<double> values(static_cast<std::size_t>(numel));
        std::memcpy(values.data(), raw.data(), raw.size());
        const std::string group = name.substr(0, dot);
        const std::string param = name.substr(dot + 1);
        if (ck.params.has_group(group) && ck.params.group(std::string_view(group)).count(param)) {
            throw FormatError("checkpoint: duplicate parameter " + name);
        }
        ck.params.set(group, param, Tensor::parameter(std::move(shape), std::move(values)));
    }
    if (!r.done()) throw FormatError("checkpoint: trailing bytes");
    for (const auto& g : frozen) {
        if (ck.params.has_group(g)) ck.params.freeze(g);
    }
    return ck;
}

Checkpoint load_checkpoint(const fs::path& path) {
    return parse_checkpoint(read_file_bytes(path));
}

void assign_groups(ModelParams& target, const ModelParams& source,
                   std::span<const std::string_view> group_names) {
    for (const auto g : group_names) {
        if (!source.has_group(g)) throw StateError("checkpoint lacks group " + std::string(g));
        if (!target.has_group(g)) throw StateError("model lacks group " + std::string(g));
        const auto& src = source.group(g);
        const auto& dst = static_cast<const ModelParams&>(target).group(g);
        if (src.size() != dst.size()) {
            throw DimensionError("group " + std::string(g) + ": parameter sets differ");
        }
        for (const auto& [name, t] : dst) {
            const auto it = src.find(name);
            if (it == src.end()) {
                throw StateError("checkpoint lacks " + std::string(g) + "." + name);
            }
            if (it->second.shape() != t.shape()) {
                throw DimensionError(std::string(g) + "." + name + ": shape " +
                                     shape_to_string(it->second.shape()) + " vs " +
                                     shape_to_string(t.shape()));
            }
        }
    }
    for (const auto g : group_names) {
        for (auto& [name, t] : target.group(g)) {
            const auto v = source.group(g).at(name).data();
            std::copy(v.begin(), v.end(), t.mutable_data().begin());
        }
    }
}

}  // namespace vlmatch
