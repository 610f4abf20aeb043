#pragma once

#include "timeguard/datagen.hpp"
#include "timeguard/stgat.hpp"

namespace tg::test {

inline datagen::DatasetConfig small_config() {
    datagen::DatasetConfig c;
    c.n_devices = 8;
    c.length = 800;
    c.window = 30;
    c.stride = 15;
    c.perturbed_fraction = 0.5;
    c.scenario_kinds = {datagen::ScenarioKind::epoch_overflow, datagen::ScenarioKind::offset_shock};
    return c;
}

inline const datagen::Dataset& small_dataset() {
    static const datagen::Dataset ds = datagen::generate_dataset(small_config());
    return ds;
}

// Small model trained in well under a second; enough to separate overflow
// and shock windows from nominal ones.
inline const stgat::Checkpoint& small_checkpoint() {
    static const stgat::Checkpoint ckpt = [] {
        const auto& ds = small_dataset();
        stgat::HyperParams h;
        h.epochs = 8;
        h.d_model = 8;
        h.n_layers = 1;
        const auto fitted = stgat::fit(ds, h);
        return stgat::Checkpoint{h, fitted.params, ds.manifest.normalization, ds.manifest.window, ds.manifest.dt};
    }();
    return ckpt;
}

}  // namespace tg::test
