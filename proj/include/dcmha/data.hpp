#pragma once

// Binary token dataset: little-endian header {magic, vocab_size, seq_len, count}
// as u32, followed by count * seq_len u16 token ids. Token 0 is reserved as PAD.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace dcmha {

constexpr uint32_t kDatasetMagic = 0x31544344;  // "DCT1"
constexpr int32_t kPadToken = 0;

struct TokenDataset {
    int64_t vocab_size = 0;
    int64_t seq_len = 0;
    int64_t count = 0;
    std::vector<uint16_t> tokens;  // count * seq_len

    const uint16_t* row(int64_t i) const { return tokens.data() + i * seq_len; }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write dataset " + path);
        uint32_t header[4] = {kDatasetMagic, static_cast<uint32_t>(vocab_size),
                              static_cast<uint32_t>(seq_len), static_cast<uint32_t>(count)};
        f.write(reinterpret_cast<const char*>(header), sizeof(header));
        f.write(reinterpret_cast<const char*>(tokens.data()), tokens.size() * sizeof(uint16_t));
    }

    static TokenDataset load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("cannot read dataset " + path);
        uint32_t header[4];
        f.read(reinterpret_cast<char*>(header), sizeof(header));
        if (!f || header[0] != kDatasetMagic) throw std::runtime_error("bad dataset magic in " + path);
        TokenDataset d;
        d.vocab_size = header[1];
        d.seq_len = header[2];
        d.count = header[3];
        d.tokens.resize(d.count * d.seq_len);
        f.read(reinterpret_cast<char*>(d.tokens.data()), d.tokens.size() * sizeof(uint16_t));
        if (!f) throw std::runtime_error("dataset " + path + " truncated");
        return d;
    }
};

}  // namespace dcmha
