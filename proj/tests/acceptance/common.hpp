#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <string>

#include "osf/dataset.hpp"
#include "osf/trainer.hpp"

namespace acceptance {

inline int g_failures = 0;
inline std::string g_cli;
inline std::string g_configs;
inline std::filesystem::path g_work;

struct Timer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

inline void report(int criterion, bool pass, const std::string& detail) {
    std::printf("[%s] criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion, detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

inline osf::FieldConfig desk_field() {
    osf::FieldConfig field;
    field.geo_width = 48;
    field.app_width = 48;
    field.geo_feature_dim = 24;
    field.feature_dim = 256;
    return field;
}

inline int hardware_workers() {
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : int(hw);
}

}  // namespace acceptance
