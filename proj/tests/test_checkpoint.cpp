#include <doctest.h>

#include <prol/checkpoint.hpp>
#include <prol/errors.hpp>
#include <prol/rng.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "grad_check.hpp"

using namespace prol;
namespace fs = std::filesystem;

namespace {

fs::path tmp_file(const char* name) {
    fs::path dir = fs::temp_directory_path() / "prol_ckpt_tests";
    fs::create_directories(dir);
    return dir / name;
}

NamedTensors sample_tensors() {
    Rng rng(5);
    NamedTensors t;
    t.put("alpha", testutil::random_tensor({3, 4}, rng));
    t.put("beta/gamma", testutil::random_tensor({7}, rng));
    t.put("delta", testutil::random_tensor({2, 2, 2}, rng));
    return t;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::vector<char>& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("round trip is bit exact for every tensor") {
    auto path = tmp_file("roundtrip.ckpt");
    NamedTensors orig = sample_tensors();
    save_container(path, orig);
    std::uint32_t version = 0;
    NamedTensors back = load_container(path, &version);
    CHECK(version == kContainerVersion);
    CHECK(back.items.size() == orig.items.size());
    for (const auto& [name, t] : orig.items) {
        REQUIRE(back.has(name));
        CHECK(back.at(name) == t);
    }
}

TEST_CASE("f32 payloads load transparently") {
    auto path = tmp_file("f32.ckpt");
    NamedTensors orig = sample_tensors();
    save_container_f32(path, orig);
    NamedTensors back = load_container(path);
    for (const auto& [name, t] : orig.items) {
        for (std::size_t i = 0; i < t.numel(); ++i)
            CHECK(back.at(name)[i] == doctest::Approx(t[i]).epsilon(1e-6));
    }
}

TEST_CASE("corrupting the magic bytes fails the load") {
    auto path = tmp_file("magic.ckpt");
    save_container(path, sample_tensors());
    auto bytes = slurp(path);
    bytes[0] = 'X';
    spit(path, bytes);
    CHECK_THROWS_AS(load_container(path), io_error);
    CHECK_THROWS_WITH_AS(load_container(path), doctest::Contains("magic"), io_error);
}

TEST_CASE("truncated file fails the load") {
    auto path = tmp_file("trunc.ckpt");
    save_container(path, sample_tensors());
    auto bytes = slurp(path);
    bytes.resize(bytes.size() - 9);
    spit(path, bytes);
    CHECK_THROWS_AS(load_container(path), io_error);
}

TEST_CASE("payload corruption fails the CRC") {
    auto path = tmp_file("crc.ckpt");
    save_container(path, sample_tensors());
    auto bytes = slurp(path);
    bytes[bytes.size() - 20] ^= 0x40;  // inside the last payload
    spit(path, bytes);
    CHECK_THROWS_WITH_AS(load_container(path), doctest::Contains("CRC"), io_error);
}

TEST_CASE("unknown dtype code is rejected") {
    auto path = tmp_file("dtype.ckpt");
    NamedTensors one;
    one.put("x", Tensor::vec({1.0, 2.0}));
    save_container(path, one);
    auto bytes = slurp(path);
    // layout: magic(8) version(4) name_len(4) name(1) dtype(1) ...
    bytes[8 + 4 + 4 + 1] = 7;
    spit(path, bytes);
    CHECK_THROWS_WITH_AS(load_container(path), doctest::Contains("dtype"), io_error);
}

TEST_CASE("missing file reports the path") {
    CHECK_THROWS_WITH_AS(load_container(tmp_file("nope.ckpt")), doctest::Contains("nope.ckpt"), io_error);
}
