#include "flowlm/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "flowlm/errors.hpp"
#include "flowlm/random.hpp"

namespace flowlm {

namespace {

constexpr const char* kHeader =
    "Date first seen,Duration,Proto,Src IP Addr,Src Pt,Dst IP Addr,Dst Pt,Packets,Bytes,Flows,"
    "Flags,Tos,class,attackType,attackID,attackDescription";

struct RawFlow {
    std::string proto;
    std::string src_port;
    std::string dst_port;
    std::string flags;
    std::uint64_t packets = 1;
    std::uint64_t bytes = 0;
    double duration = 0.0;
};

class Generator {
public:
    explicit Generator(Rng& rng) : rng_(rng) {}

    int uniform(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
    double real(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
    double exponential(double mean) { return std::exponential_distribution<double>(1.0 / mean)(rng_); }
    bool chance(double p) { return real(0.0, 1.0) < p; }
    template <typename C>
    const auto& pick(const C& items) {
        return items[static_cast<std::size_t>(uniform(0, static_cast<int>(items.size()) - 1))];
    }
    int ephemeral() { return uniform(32768, 60999); }

    RawFlow background(bool external) {
        RawFlow f;
        if (chance(0.7)) {
            static const std::vector<int> internal_services = {80, 443, 445, 8000};
            static const std::vector<int> external_services = {80, 443};
            const int service = pick(external ? external_services : internal_services);
            static const std::vector<std::string> flags = {".AP.SF", ".AP.S.", ".A....", ".AP..."};
            f.proto = "TCP";
            f.flags = pick(flags);
            f.packets = static_cast<std::uint64_t>(uniform(2, 40));
            f.bytes = f.packets * static_cast<std::uint64_t>(uniform(external ? 80 : 60, 1400));
            f.duration = exponential(external ? 1.5 : 0.6);
            if (chance(0.02)) {
                f.bytes = static_cast<std::uint64_t>(real(1.0e6, 4.0e7));
                f.packets = f.bytes / 1200 + 1;
                f.duration = real(5.0, 120.0);
            }
            if (chance(0.5)) {
                f.src_port = std::to_string(ephemeral());
                f.dst_port = std::to_string(service);
            } else {
                f.src_port = std::to_string(service);
                f.dst_port = std::to_string(ephemeral());
            }
        } else {
            static const std::vector<int> udp_services = {53, 123, 137, 138};
            f.proto = "UDP";
            f.flags = "......";
            f.packets = static_cast<std::uint64_t>(uniform(1, 2));
            f.bytes = f.packets * static_cast<std::uint64_t>(uniform(60, 300));
            f.duration = chance(0.6) ? 0.0 : real(0.0, 0.1);
            f.src_port = std::to_string(ephemeral());
            f.dst_port = std::to_string(pick(udp_services));
        }
        return f;
    }

    RawFlow dos() {
        RawFlow f;
        f.proto = "TCP";
        f.flags = "....S.";
        f.packets = 1;
        f.bytes = static_cast<std::uint64_t>(uniform(58, 60));
        f.src_port = std::to_string(ephemeral());
        f.dst_port = "80";
        return f;
    }

    RawFlow port_scan() {
        static const std::vector<std::string> flags = {"....S.", ".A.R..", "...RS."};
        RawFlow f;
        f.proto = "TCP";
        f.flags = pick(flags);
        f.packets = static_cast<std::uint64_t>(uniform(1, 2));
        f.bytes = f.packets * static_cast<std::uint64_t>(uniform(40, 44));
        f.duration = chance(0.7) ? 0.0 : real(0.0, 0.01);
        f.src_port = std::to_string(uniform(40000, 40100));
        f.dst_port = std::to_string(uniform(1, 1024));
        return f;
    }

    RawFlow ping_scan() {
        RawFlow f;
        f.proto = "ICMP";
        f.flags = "......";
        f.packets = 1;
        f.bytes = chance(0.5) ? 28 : 84;
        f.src_port = "0";
        f.dst_port = chance(0.8) ? "8.0" : "0.0";
        return f;
    }

    RawFlow brute_force() {
        RawFlow f;
        f.proto = "TCP";
        f.flags = ".AP.SF";
        f.packets = static_cast<std::uint64_t>(uniform(15, 40));
        f.bytes = f.packets * static_cast<std::uint64_t>(uniform(90, 160));
        f.duration = real(2.0, 10.0);
        f.src_port = std::to_string(ephemeral());
        f.dst_port = "22";
        return f;
    }

    RawFlow suspicious() {
        if (chance(0.6)) {
            RawFlow f = port_scan();
            f.src_port = std::to_string(ephemeral());
            f.dst_port = std::to_string(uniform(1, 65535));
            return f;
        }
        RawFlow f;
        f.proto = "TCP";
        f.flags = chance(0.5) ? ".AP.SF" : "....S.";
        f.packets = static_cast<std::uint64_t>(uniform(1, 6));
        f.bytes = f.packets * static_cast<std::uint64_t>(uniform(40, 400));
        f.duration = real(0.0, 0.5);
        f.src_port = std::to_string(ephemeral());
        f.dst_port = chance(0.5) ? "80" : "22";
        return f;
    }

private:
    Rng& rng_;
};

std::string format_bytes(std::uint64_t bytes) {
    if (bytes >= 1000000) {
        return fmt::format("{:.1f} M", static_cast<double>(bytes) / 1e6);
    }
    return std::to_string(bytes);
}

}  // namespace

std::vector<std::pair<std::string, std::size_t>> synthetic_composition(DomainTag domain,
                                                                       std::size_t total) {
    const auto part = [&](double share) {
        return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(share * static_cast<double>(total))));
    };
    switch (domain) {
        case DomainTag::cidds1_internal:
            return {{"normal", part(0.55)}, {"dos", part(0.35)}, {"portScan", part(0.08)},
                    {"pingScan", part(0.01)}, {"bruteForce", part(0.01)}};
        case DomainTag::cidds1_external:
            return {{"unknown", part(0.5)}, {"suspicious", part(0.5)}};
        case DomainTag::cidds2:
            return {{"normal", part(0.5)}, {"scan", part(0.5)}};
    }
    return {};
}

FlowTable synthetic_capture(DomainTag domain,
                            const std::vector<std::pair<std::string, std::size_t>>& composition,
                            std::uint64_t seed) {
    Rng rng(child_seed(seed, "synthetic/" + std::string(to_string(domain))));
    Generator gen(rng);

    const std::string background_label = domain == DomainTag::cidds1_external ? "unknown" : "normal";

    // Background traffic in short stretches, attacks in bursts; chunks are then
    // shuffled so bursts land between stretches of background flows.
    std::vector<std::pair<std::string, std::size_t>> chunks;
    for (const auto& [label, count] : composition) {
        std::size_t left = count;
        const bool background = label == background_label;
        while (left > 0) {
            const auto size = std::min<std::size_t>(
                left, static_cast<std::size_t>(background ? gen.uniform(1, 40) : gen.uniform(5, 120)));
            chunks.emplace_back(label, size);
            left -= size;
        }
    }
    std::shuffle(chunks.begin(), chunks.end(), rng);

    FlowTable table;
    table.domain_tag = domain;
    table.source_path = "<synthetic>";
    table.header_line = kHeader;
    const auto columns = ColumnIndex::resolve(split_csv_line(kHeader), CsvSchema{});

    double clock = 0.0;
    std::size_t attack_id = 0;
    for (const auto& [label, size] : chunks) {
        const bool background = label == background_label;
        if (!background) ++attack_id;
        for (std::size_t i = 0; i < size; ++i) {
            RawFlow f;
            std::string cls = "normal";
            std::string attack_type = "---";
            if (domain == DomainTag::cidds1_external) {
                f = background ? gen.background(true) : gen.suspicious();
                cls = background ? "unknown" : "suspicious";
            } else if (background) {
                f = gen.background(false);
            } else {
                cls = "attacker";
                if (label == "dos") f = gen.dos();
                else if (label == "portScan") f = gen.port_scan();
                else if (label == "pingScan") f = gen.ping_scan();
                else if (label == "bruteForce") f = gen.brute_force();
                else if (label == "scan") f = gen.chance(0.8) ? gen.port_scan() : gen.ping_scan();
                else throw Error(ErrorKind::data, "synthetic generator has no model for label '" + label + "'");
                attack_type = label == "scan" ? (f.proto == "ICMP" ? "pingScan" : "portScan") : label;
            }
            clock += gen.exponential(background ? 0.05 : 0.005);
            const auto seconds = static_cast<int>(clock);
            const auto line = fmt::format(
                "2017-03-15 {:02d}:{:02d}:{:02d}.{:03d},{:.3f},{:<5},192.168.{}.{},{},192.168.{}.{},{},{},{},1,{},0,{},{},{},{}",
                (seconds / 3600) % 24, (seconds / 60) % 60, seconds % 60,
                static_cast<int>((clock - seconds) * 1000), f.duration, f.proto, gen.uniform(100, 220),
                gen.uniform(1, 254), f.src_port, gen.uniform(100, 220), gen.uniform(1, 254), f.dst_port,
                f.packets, format_bytes(f.bytes), f.flags, cls, attack_type,
                background ? std::string("---") : std::to_string(attack_id),
                background ? "---" : "synthetic");
            table.records.push_back(parse_flow_record(split_csv_line(line), columns,
                                                      static_cast<std::int64_t>(table.records.size()),
                                                      domain, table.records.size() + 1));
            table.raw_rows.push_back(line);
        }
    }
    return table;
}

void write_raw_csv(const FlowTable& table, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write '" + path + "'");
    }
    out << table.header_line << '\n';
    for (const auto& row : table.raw_rows) {
        out << row << '\n';
    }
    if (!out) {
        throw IoError("failed writing '" + path + "'");
    }
}

}  // namespace flowlm
