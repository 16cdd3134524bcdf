#include "hsb/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace hsb {
namespace {

constexpr char kMagic[4] = {'H', 'S', 'B', '1'};

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error(std::string("checkpoint: truncated ") + what);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

// Payloads are written via memcpy; this code targets little-endian hosts,
// which matches the declared on-disk byte order.
template <typename T>
void put_array(std::ostream& os, const std::string& name, uint8_t dtype, const Tensor<T>& t) {
    put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(static_cast<char>(dtype));
    put_u32(os, static_cast<uint32_t>(t.shape.size()));
    for (int e : t.shape) put_u32(os, static_cast<uint32_t>(e));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(T)));
}

template <typename T>
Tensor<T> get_payload(std::istream& is, const Shape& shape) {
    Tensor<T> t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(T)));
    if (!is) throw std::runtime_error("checkpoint: truncated array payload");
    return t;
}

Tensor<double> scalar(double v) {
    Tensor<double> t({1});
    t.data[0] = v;
    return t;
}

double want_scalar(const ArrayFile& a, const std::string& name) {
    auto it = a.f64.find(name);
    if (it == a.f64.end()) throw std::runtime_error("checkpoint: missing array '" + name + "'");
    if (it->second.data.size() != 1) {
        throw std::runtime_error("checkpoint: '" + name + "' is not a scalar");
    }
    return it->second.data[0];
}

const Tensor<double>& want_f64(const ArrayFile& a, const std::string& name) {
    auto it = a.f64.find(name);
    if (it == a.f64.end()) throw std::runtime_error("checkpoint: missing array '" + name + "'");
    return it->second;
}

const Tensor<float>& want_f32(const ArrayFile& a, const std::string& name) {
    auto it = a.f32.find(name);
    if (it == a.f32.end()) throw std::runtime_error("checkpoint: missing array '" + name + "'");
    return it->second;
}

bool starts_with(const std::string& s, const std::string& p) {
    return s.size() >= p.size() && s.compare(0, p.size(), p) == 0;
}

}  // namespace

void write_array_file(const std::string& path, const ArrayFile& arrays) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    os.write(kMagic, 4);
    put_u32(os, kCheckpointVersion);
    for (const auto& [name, t] : arrays.f32) put_array(os, name, 0, t);
    for (const auto& [name, t] : arrays.f64) put_array(os, name, 1, t);
    os.flush();
    if (!os) throw std::runtime_error("checkpoint: write to '" + path + "' failed");
}

ArrayFile read_array_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
    }
    uint32_t version = get_u32(is, "version");
    if (version != kCheckpointVersion) {
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    }
    ArrayFile out;
    while (true) {
        int peek = is.peek();
        if (peek == std::char_traits<char>::eof()) break;
        uint32_t name_len = get_u32(is, "name length");
        if (name_len > 4096) throw std::runtime_error("checkpoint: implausible name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw std::runtime_error("checkpoint: truncated name");
        int dtype = is.get();
        if (dtype == std::char_traits<char>::eof()) {
            throw std::runtime_error("checkpoint: truncated dtype");
        }
        uint32_t rank = get_u32(is, "rank");
        if (rank > 8) throw std::runtime_error("checkpoint: implausible rank");
        Shape shape;
        size_t count = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            uint32_t e = get_u32(is, "extent");
            shape.push_back(static_cast<int>(e));
            count *= e;
        }
        if (count > (1u << 28)) throw std::runtime_error("checkpoint: implausible array size");
        if (dtype == 0) {
            out.f32.emplace(name, get_payload<float>(is, shape));
        } else if (dtype == 1) {
            out.f64.emplace(name, get_payload<double>(is, shape));
        } else {
            throw std::runtime_error("checkpoint: unknown dtype code " + std::to_string(dtype));
        }
    }
    return out;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    ArrayFile a;
    for (const auto& [name, t] : ckpt.params.values) a.f32.emplace("param/" + name, t);
    for (const auto& [name, t] : ckpt.opt_g_m) a.f32.emplace("optg/m/" + name, t);
    for (const auto& [name, t] : ckpt.opt_g_v) a.f32.emplace("optg/v/" + name, t);
    for (const auto& [name, t] : ckpt.opt_d_m) a.f32.emplace("optd/m/" + name, t);
    for (const auto& [name, t] : ckpt.opt_d_v) a.f32.emplace("optd/v/" + name, t);

    const PrototypeBank& bank = ckpt.bank;
    int c = bank.num_classes, d = bank.dim;
    Tensor<float> protos({c, d});
    Tensor<float> init({c});
    Tensor<double> seen({c});
    for (int i = 0; i < c; ++i) {
        for (int j = 0; j < d; ++j) {
            protos.at2(i, j) = bank.protos[static_cast<size_t>(i)][static_cast<size_t>(j)];
        }
        init.data[static_cast<size_t>(i)] = bank.initialized[static_cast<size_t>(i)] ? 1.0f : 0.0f;
        seen.data[static_cast<size_t>(i)] = static_cast<double>(bank.seen[static_cast<size_t>(i)]);
    }
    a.f32.emplace("bank/protos", std::move(protos));
    a.f32.emplace("bank/init", std::move(init));
    a.f64.emplace("bank/seen", std::move(seen));
    a.f64.emplace("bank/alpha", scalar(bank.alpha));

    a.f64.emplace("meta/iteration", scalar(static_cast<double>(ckpt.iteration)));
    Tensor<double> steps({2});
    steps.data[0] = static_cast<double>(ckpt.opt_g_steps);
    steps.data[1] = static_cast<double>(ckpt.opt_d_steps);
    a.f64.emplace("meta/opt_steps", std::move(steps));
    Tensor<double> gen({4});
    gen.data[0] = ckpt.gen_cfg.image_channels;
    gen.data[1] = ckpt.gen_cfg.base_width;
    gen.data[2] = ckpt.gen_cfg.res_blocks;
    gen.data[3] = ckpt.gen_cfg.emb_dim;
    a.f64.emplace("meta/gen_cfg", std::move(gen));
    Tensor<double> chain({2});
    chain.data[0] = ckpt.chain.steps;
    chain.data[1] = ckpt.chain.tau_sb;
    a.f64.emplace("meta/chain", std::move(chain));
    a.f64.emplace("meta/num_classes", scalar(ckpt.num_classes));

    write_array_file(path, a);
}

Checkpoint load_checkpoint(const std::string& path) {
    ArrayFile a = read_array_file(path);
    Checkpoint c;
    c.iteration = static_cast<int64_t>(want_scalar(a, "meta/iteration"));
    const Tensor<double>& steps = want_f64(a, "meta/opt_steps");
    if (steps.data.size() != 2) throw std::runtime_error("checkpoint: malformed meta/opt_steps");
    c.opt_g_steps = static_cast<int64_t>(steps.data[0]);
    c.opt_d_steps = static_cast<int64_t>(steps.data[1]);
    const Tensor<double>& gen = want_f64(a, "meta/gen_cfg");
    if (gen.data.size() != 4) throw std::runtime_error("checkpoint: malformed meta/gen_cfg");
    c.gen_cfg.image_channels = static_cast<int>(gen.data[0]);
    c.gen_cfg.base_width = static_cast<int>(gen.data[1]);
    c.gen_cfg.res_blocks = static_cast<int>(gen.data[2]);
    c.gen_cfg.emb_dim = static_cast<int>(gen.data[3]);
    const Tensor<double>& chain = want_f64(a, "meta/chain");
    if (chain.data.size() != 2) throw std::runtime_error("checkpoint: malformed meta/chain");
    c.chain.steps = static_cast<int>(chain.data[0]);
    c.chain.tau_sb = chain.data[1];
    c.num_classes = static_cast<int>(want_scalar(a, "meta/num_classes"));

    const Tensor<float>& protos = want_f32(a, "bank/protos");
    if (protos.shape.size() != 2) throw std::runtime_error("checkpoint: malformed bank/protos");
    int nc = protos.dim(0), dim = protos.dim(1);
    c.bank = PrototypeBank(nc, dim, want_scalar(a, "bank/alpha"));
    const Tensor<float>& init = want_f32(a, "bank/init");
    const Tensor<double>& seen = want_f64(a, "bank/seen");
    if (static_cast<int>(init.data.size()) != nc || static_cast<int>(seen.data.size()) != nc) {
        throw std::runtime_error("checkpoint: malformed bank arrays");
    }
    for (int i = 0; i < nc; ++i) {
        for (int j = 0; j < dim; ++j) {
            c.bank.protos[static_cast<size_t>(i)][static_cast<size_t>(j)] = protos.at2(i, j);
        }
        c.bank.initialized[static_cast<size_t>(i)] = init.data[static_cast<size_t>(i)] != 0.0f;
        c.bank.seen[static_cast<size_t>(i)] =
            static_cast<int64_t>(seen.data[static_cast<size_t>(i)]);
    }

    for (auto& [name, t] : a.f32) {
        if (starts_with(name, "param/")) {
            c.params.values.emplace(name.substr(6), std::move(t));
        } else if (starts_with(name, "optg/m/")) {
            c.opt_g_m.emplace(name.substr(7), std::move(t));
        } else if (starts_with(name, "optg/v/")) {
            c.opt_g_v.emplace(name.substr(7), std::move(t));
        } else if (starts_with(name, "optd/m/")) {
            c.opt_d_m.emplace(name.substr(7), std::move(t));
        } else if (starts_with(name, "optd/v/")) {
            c.opt_d_v.emplace(name.substr(7), std::move(t));
        } else if (!starts_with(name, "bank/")) {
            throw std::runtime_error("checkpoint: unknown array '" + name + "'");
        }
    }
    return c;
}

void save_encoder(const std::string& path, const SharedEncoder& encoder) {
    ArrayFile a;
    for (const auto& [name, t] : encoder.params.values) a.f32.emplace("param/" + name, t);
    Tensor<double> meta({5});
    meta.data[0] = encoder.cfg.image_channels;
    meta.data[1] = encoder.cfg.w1;
    meta.data[2] = encoder.cfg.w2;
    meta.data[3] = encoder.cfg.w3;
    meta.data[4] = encoder.frozen ? 1.0 : 0.0;
    a.f64.emplace("meta/encoder", std::move(meta));
    write_array_file(path, a);
}

SharedEncoder load_encoder(const std::string& path) {
    ArrayFile a = read_array_file(path);
    auto it = a.f64.find("meta/encoder");
    if (it == a.f64.end() || it->second.data.size() != 5) {
        throw std::runtime_error("encoder file: missing metadata in '" + path + "'");
    }
    SharedEncoder enc;
    enc.cfg.image_channels = static_cast<int>(it->second.data[0]);
    enc.cfg.w1 = static_cast<int>(it->second.data[1]);
    enc.cfg.w2 = static_cast<int>(it->second.data[2]);
    enc.cfg.w3 = static_cast<int>(it->second.data[3]);
    enc.frozen = it->second.data[4] != 0.0;
    for (auto& [name, t] : a.f32) {
        if (starts_with(name, "param/")) enc.params.values.emplace(name.substr(6), std::move(t));
    }
    return enc;
}

ParamStore<float> filter_params(const ParamStore<float>& store, const std::string& prefix) {
    ParamStore<float> out;
    for (const auto& [name, t] : store.values) {
        if (starts_with(name, prefix)) out.values.emplace(name, t);
    }
    return out;
}

}  // namespace hsb
