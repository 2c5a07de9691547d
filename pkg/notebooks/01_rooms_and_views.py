"""
Rooms, impulse responses and what the listener sees
====================================================

A shoebox room is fully described by its size, the absorption of its six
walls and where the speaker and the listener stand. From that description
we get two things: the impulse response that reverberates the speech, and
a panorama the visual tower later learns from.
"""
import numpy as np

from visdereverb.room import Pose, ShoeboxRoom, rt60_schroeder, simulate_rir
from visdereverb.view import ViewConfig, crop_fov, remove_speaker, render_panorama, roll_panorama

###############################################################################
# Two rooms: a small absorbent office and a large live hall.

office = ShoeboxRoom((4.0, 3.5, 2.7), (0.4,) * 6)
hall = ShoeboxRoom((8.0, 6.0, 3.5), (0.12,) * 6)
speaker = Pose((1.2, 1.0, 1.6))
listener = Pose((2.8, 2.4, 1.5))

for name, room in (("office", office), ("hall", hall)):
    rir = simulate_rir(room, speaker, listener, max_order=30)
    print(f"{name}: Sabine {room.sabine_rt60():.2f} s, Schroeder {rt60_schroeder(rir):.2f} s, "
          f"{len(rir.samples)} taps")

###############################################################################
# The direct sound arrives after d / c seconds. With fully absorbing walls
# it is the only arrival. In a live room a coincident group of reflections
# can outweigh it.

anechoic = ShoeboxRoom(office.dims, (1.0,) * 6)
rir = simulate_rir(anechoic, speaker, listener, max_order=30)
d = np.linalg.norm(np.subtract(speaker.position, listener.position))
print("expected arrival sample", round(16000 * d / 343.0), "peak at", int(np.argmax(np.abs(rir.samples))))

###############################################################################
# The panorama has three channels: depth, wall albedo (one minus
# absorption) and a mask marking the speaker.

view = ViewConfig()
pano = render_panorama(office, listener, speaker, view)
print("panorama", pano.shape, "depth range", pano.depth.min().round(2), pano.depth.max().round(2))
print("speaker covers", int(pano.speaker_mask.sum()), "pixels")

# Sound at the listener does not depend on which way they face, so rolling
# the panorama is a free augmentation. A narrow field of view and a
# panorama with the speaker removed are the two visual ablations.
rolled = roll_panorama(pano, 90.0)
narrow = crop_fov(pano, 45.0, 80.0)
hidden = remove_speaker(pano)
print("rolled", rolled.shape, "80 degree crop", narrow.shape, "mask after removal", int(hidden.speaker_mask.sum()))
