#include "sinewich/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace sinewich {

namespace {

constexpr char kMagic[8] = {'S', 'N', 'W', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw ContractViolation("checkpoint truncated");
    return v;
}

void put_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.raw()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

void read_tensor(std::istream& is, const std::string& expected_name, Tensor& into) {
    const auto len = get<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw ContractViolation("checkpoint truncated");
    if (name != expected_name) {
        throw ContractViolation("checkpoint tensor '" + name + "' where '" + expected_name + "' was expected");
    }
    const auto rank = get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(is);
    if (shape != into.shape()) {
        throw ContractViolation("checkpoint tensor '" + name + "' has shape " + shape_to_string(shape) +
                                ", model expects " + shape_to_string(into.shape()));
    }
    is.read(reinterpret_cast<char*>(into.raw()), static_cast<std::streamsize>(into.size() * sizeof(double)));
    if (!is) throw ContractViolation("checkpoint truncated");
}

}  // namespace

std::uint64_t config_hash(const ModelConfig& c) {
    std::ostringstream os;
    os << "in=" << c.in_channels << ";img=" << c.image_size << ";stages=" << c.stage_channels[0] << ","
       << c.stage_channels[1] << "," << c.stage_channels[2] << "," << c.stage_channels[3]
       << ";blocks=" << c.blocks_per_stage << ";tasks=" << c.tasks << ";out=" << c.out_channels
       << ";token=" << c.token_width << ";ta_r=" << c.ta_rank << ";ts_r=" << c.ts_rank << ";ts_k=" << c.ts_kernel
       << ";proj=" << c.proj_channels << ";dec=" << c.decoder_channels << ";dec_r=" << c.decoder_rank
       << ";dec_k=" << c.decoder_kernel << ";mod=" << to_string(c.modulation) << ";ib=" << c.independent_base
       << ";id=" << c.independent_decoder << ";filter=";
    if (c.filter) {
        os << c.filter->size << "/" << std::bit_cast<std::uint64_t>(c.filter->sigma);
    } else {
        os << "none";
    }
    os << ";seed=" << c.seed;
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : os.str()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(os, kVersion);
    put<std::uint64_t>(os, config_hash(model.config()));
    const ParameterSet& params = model.parameters();
    const ParameterSet& buffers = model.buffers();
    put<std::uint64_t>(os, params.size());
    put<std::uint64_t>(os, buffers.size());
    for (std::size_t i = 0; i < params.size(); ++i) put_tensor(os, params.name(i), params.value(i));
    for (std::size_t i = 0; i < buffers.size(); ++i) put_tensor(os, buffers.name(i), buffers.value(i));
    if (!os) throw std::runtime_error("failed writing " + path.string());
}

void load_checkpoint(Model& model, const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    char magic[sizeof kMagic];
    is.read(magic, sizeof magic);
    if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw ContractViolation("not a checkpoint file");
    if (get<std::uint32_t>(is) != kVersion) throw ContractViolation("unsupported checkpoint version");
    if (get<std::uint64_t>(is) != config_hash(model.config())) {
        throw ContractViolation("checkpoint was written for a different model config");
    }
    // Read into copies so a failed load leaves the model untouched.
    ParameterSet params = std::as_const(model).parameters();
    ParameterSet buffers = model.buffers();
    if (get<std::uint64_t>(is) != params.size() || get<std::uint64_t>(is) != buffers.size()) {
        throw ContractViolation("checkpoint tensor count does not match the model");
    }
    for (std::size_t i = 0; i < params.size(); ++i) read_tensor(is, params.name(i), params.value(i));
    for (std::size_t i = 0; i < buffers.size(); ++i) read_tensor(is, buffers.name(i), buffers.value(i));
    if (is.peek() != std::char_traits<char>::eof()) throw ContractViolation("trailing bytes after checkpoint");
    model.parameters() = std::move(params);
    model.buffers() = std::move(buffers);
}

}  // namespace sinewich
