#include "prol/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <vector>

#include "prol/errors.hpp"

namespace prol {

namespace {

constexpr char kMagic[8] = {'P', 'R', 'O', 'L', 'C', 'K', 'P', 'T'};

void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    Reader(const std::filesystem::path& path) : path_(path.string()) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw io_error("cannot open checkpoint file: " + path_);
        bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }

    const char* take(std::size_t n) {
        if (remaining() < n) throw io_error("truncated checkpoint file: " + path_);
        const char* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }

    std::uint32_t u32() {
        const unsigned char* p = reinterpret_cast<const unsigned char*>(take(4));
        return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
               std::uint32_t(p[3]) << 24;
    }

    std::uint64_t u64() {
        const unsigned char* p = reinterpret_cast<const unsigned char*>(take(8));
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
        return v;
    }

    std::uint8_t u8() { return static_cast<std::uint8_t>(*take(1)); }

    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::vector<char> bytes_;
    std::size_t pos_ = 0;
};

void write_file(const std::filesystem::path& path, const NamedTensors& tensors, std::uint32_t version,
                bool as_f32) {
    std::string buf;
    buf.append(kMagic, sizeof(kMagic));
    put_u32(buf, version);

    std::uint32_t crc = crc32(0L, Z_NULL, 0);
    for (const auto& [name, t] : tensors.items) {
        put_u32(buf, static_cast<std::uint32_t>(name.size()));
        buf.append(name);
        buf.push_back(as_f32 ? 0 : 1);
        buf.push_back(static_cast<char>(t.rank()));
        for (std::size_t d : t.shape) put_u64(buf, d);
        std::size_t start = buf.size();
        if (as_f32) {
            for (double v : t.data) {
                float f = static_cast<float>(v);
                buf.append(reinterpret_cast<const char*>(&f), sizeof(f));
            }
        } else {
            buf.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double));
        }
        crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data() + start), buf.size() - start);
    }
    put_u32(buf, static_cast<std::uint32_t>(crc));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write checkpoint file: " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw io_error("short write on checkpoint file: " + path.string());
}

}  // namespace

const Tensor& NamedTensors::at(const std::string& name) const {
    auto it = items.find(name);
    if (it == items.end()) throw io_error("missing tensor in container: " + name);
    return it->second;
}

void save_container(const std::filesystem::path& path, const NamedTensors& tensors, std::uint32_t version) {
    write_file(path, tensors, version, /*as_f32=*/false);
}

void save_container_f32(const std::filesystem::path& path, const NamedTensors& tensors) {
    write_file(path, tensors, kContainerVersion, /*as_f32=*/true);
}

NamedTensors load_container(const std::filesystem::path& path, std::uint32_t* version_out) {
    Reader r(path);
    if (r.remaining() < sizeof(kMagic) + 8) throw io_error("truncated checkpoint file: " + r.path());
    if (std::memcmp(r.take(sizeof(kMagic)), kMagic, sizeof(kMagic)) != 0)
        throw io_error("bad magic bytes, not a PROLCKPT container: " + r.path());
    std::uint32_t version = r.u32();
    if (version_out) *version_out = version;

    NamedTensors out;
    std::uint32_t crc = crc32(0L, Z_NULL, 0);
    while (r.remaining() > 4) {
        std::uint32_t name_len = r.u32();
        std::string name(r.take(name_len), name_len);
        std::uint8_t dtype = r.u8();
        if (dtype > 1) throw io_error("unknown dtype code " + std::to_string(dtype) + " in " + r.path());
        std::uint8_t rank = r.u8();
        std::vector<std::size_t> shape(rank);
        std::size_t numel = 1;
        for (std::uint8_t i = 0; i < rank; ++i) {
            shape[i] = static_cast<std::size_t>(r.u64());
            numel *= shape[i];
        }
        std::size_t elem = dtype == 0 ? sizeof(float) : sizeof(double);
        const char* payload = r.take(numel * elem);
        crc = crc32(crc, reinterpret_cast<const Bytef*>(payload), numel * elem);
        Tensor t(std::move(shape));
        if (dtype == 0) {
            const float* f = reinterpret_cast<const float*>(payload);
            for (std::size_t i = 0; i < numel; ++i) t[i] = static_cast<double>(f[i]);
        } else {
            std::memcpy(t.data.data(), payload, numel * sizeof(double));
        }
        if (out.items.count(name)) throw io_error("duplicate tensor name in container: " + name);
        out.items[name] = std::move(t);
    }
    if (r.remaining() != 4) throw io_error("truncated checkpoint file: " + r.path());
    std::uint32_t stored = r.u32();
    if (stored != static_cast<std::uint32_t>(crc))
        throw io_error("payload CRC mismatch in checkpoint file: " + r.path());
    return out;
}

}  // namespace prol
